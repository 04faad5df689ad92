"""Command-line entry points: train, encode, retrieve, evaluate, plot, sweep.

Exit codes: 0 success, 2 usage/config error, 3 data or file-format error,
4 training divergence. Every run directory embeds a manifest with the full
config snapshot so results are reconstructable.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attention import save_map_png, attend
from .config import (ConfigError, ExperimentConfig, load_experiment_config,
                     load_splits, override_value)
from .hashnet import (encode_attention_guided_many, encode_final_many,
                      load_checkpoint)
from .metrics import evaluate_codes, relevance_matrix
from .retrieval import load_codes, pack, rank_gallery, save_codes, unpack
from .trainer import TrainingDivergenceError, run_pipeline, write_history_csv


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = load_splits(cfg)
    state = run_pipeline(splits.train, cfg.train, cfg.model, out_dir=out_dir)
    write_history_csv(out_dir / "loss_history.csv", state.history)
    manifest = {
        "config": cfg.to_snapshot(),
        "seed": cfg.train.seed,
        "code_version": __version__,
        "beta_final": state.beta_final,
        "history": state.history,
        "created_at": datetime.now(timezone.utc).isoformat(),
    }
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(f"trained; checkpoints and loss history in {out_dir}")
    return 0


def _encode_with_checkpoint(nets, pixels: np.ndarray) -> np.ndarray:
    if "hash2" in nets:
        return encode_final_many(pixels, nets["hash2"])
    if "attention" in nets and "hash1" in nets:
        return encode_attention_guided_many(pixels, nets["attention"], nets["hash1"])
    raise ValueError(f"checkpoint has no usable networks (found {sorted(nets)})")


def cmd_encode(args) -> int:
    cfg = load_experiment_config(args.config)
    nets, meta = load_checkpoint(args.checkpoint)
    splits = load_splits(cfg)
    dataset = getattr(splits, args.split)
    pixels = dataset.pixel_stack()
    start = time.perf_counter()
    codes = _encode_with_checkpoint(nets, pixels)
    elapsed = time.perf_counter() - start
    us_per_image = elapsed / len(dataset) * 1e6
    save_codes(args.out, pack(codes))
    sidecar = {
        "split": dataset.split,
        "count": len(dataset),
        "code_length": codes.shape[1],
        "encode_us_per_image": us_per_image,
        "checkpoint_meta": meta,
        "labels": [sorted(s.labels) for s in dataset.samples],
    }
    with open(f"{args.out}.meta.json", "w") as fh:
        json.dump(sidecar, fh)
    print(f"encoded {len(dataset)} images -> {args.out} "
          f"({us_per_image:.1f} us/image)")
    return 0


def cmd_retrieve(args) -> int:
    queries = load_codes(args.query_codes)
    gallery = load_codes(args.gallery_codes)
    if queries.k != gallery.k:
        raise ValueError(f"code length mismatch: queries {queries.k} vs gallery {gallery.k}")
    qmat = unpack(queries)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "rank", "gallery_id", "distance"])
        for qi in range(queries.n):
            ranking = rank_gallery(qmat[qi], gallery, query_id=qi)
            for rank, (gid, dist) in enumerate(zip(ranking.gallery_ids, ranking.distances)):
                writer.writerow([qi, rank, int(gid), int(dist)])
    print(f"wrote rankings for {queries.n} queries to {args.out}")
    return 0


def _load_labels(args) -> tuple[list, list]:
    if args.labels:
        with open(args.labels) as fh:
            data = json.load(fh)
        return data["query"], data["gallery"]
    out = []
    for path in (args.query, args.gallery):
        sidecar = Path(f"{path}.meta.json")
        if not sidecar.exists():
            raise ValueError(
                f"no labels: pass --labels or keep the encode sidecar {sidecar}"
            )
        with open(sidecar) as fh:
            out.append(json.load(fh)["labels"])
    return out[0], out[1]


def cmd_evaluate(args) -> int:
    cfg = load_experiment_config(args.config)
    queries = load_codes(args.query)
    gallery = load_codes(args.gallery)
    if queries.k != gallery.k:
        raise ValueError(f"code length mismatch: query file K={queries.k}, gallery file K={gallery.k}")
    query_labels, gallery_labels = _load_labels(args)
    if len(query_labels) != queries.n or len(gallery_labels) != gallery.n:
        raise ValueError("label counts do not match code counts")
    ns = [n for n in cfg.eval.top_ns if n <= gallery.n]
    skipped = sorted(set(cfg.eval.top_ns) - set(ns))
    if skipped:
        print(f"warning: skipping top_ns beyond gallery size: {skipped}", file=sys.stderr)
    relevance = relevance_matrix([frozenset(l) for l in query_labels],
                                 [frozenset(l) for l in gallery_labels])
    report = evaluate_codes(unpack(queries), gallery, relevance, cfg.eval.cutoff, ns)
    sidecar = Path(f"{args.query}.meta.json")
    if sidecar.exists():
        with open(sidecar) as fh:
            report.encode_us_per_image = json.load(fh).get("encode_us_per_image")
    report.extras = {
        "code_length": queries.k,
        "n_query": queries.n,
        "n_gallery": gallery.n,
        "cutoff": cfg.eval.cutoff,
    }
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.save_json(out_dir / "report.json")
    report.save_curves_csv(out_dir / "pr_curve.csv", out_dir / "p_at_n.csv")
    print(f"map={report.map:.4f} p@h2={report.p_at_h2:.4f} -> {out_dir}")
    return 0


def _plot_metric_files(report_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pr_path = report_dir / "pr_curve.csv"
    pn_path = report_dir / "p_at_n.csv"
    if not pr_path.exists() or not pn_path.exists():
        raise ValueError(f"no evaluation CSVs in {report_dir}; run evaluate first")
    written = []

    pr = np.loadtxt(pr_path, delimiter=",", skiprows=1, ndmin=2)
    fig, ax = plt.subplots()
    ax.plot(pr[:, 0], pr[:, 1])
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title("precision-recall")
    fig.savefig(report_dir / "pr_curve.png")
    plt.close(fig)
    written.append(report_dir / "pr_curve.png")

    pn = np.loadtxt(pn_path, delimiter=",", skiprows=1, ndmin=2)
    fig, ax = plt.subplots()
    ax.plot(pn[:, 0], pn[:, 1], marker="o")
    ax.set_xlabel("top n returned")
    ax.set_ylabel("precision")
    ax.set_title("precision at top n")
    fig.savefig(report_dir / "p_at_n.png")
    plt.close(fig)
    written.append(report_dir / "p_at_n.png")

    points = []
    for report_file in sorted(report_dir.rglob("report.json")):
        with open(report_file) as fh:
            data = json.load(fh)
        points.append((data.get("extras", {}).get("code_length", 0), data["p_at_h2"]))
    fig, ax = plt.subplots()
    bits = [p[0] for p in points]
    vals = [p[1] for p in points]
    ax.plot(bits, vals, marker="s")
    ax.set_xlabel("code length (bits)")
    ax.set_ylabel("precision within Hamming radius 2")
    ax.set_title("p@h=2 vs bits")
    fig.savefig(report_dir / "p_at_h2.png")
    plt.close(fig)
    written.append(report_dir / "p_at_h2.png")
    return written


def cmd_plot(args) -> int:
    report_dir = Path(args.report_dir)
    if not report_dir.is_dir():
        raise ValueError(f"report directory not found: {report_dir}")
    written = _plot_metric_files(report_dir)
    if args.attention_checkpoint:
        import torch

        cfg = load_experiment_config(args.config)
        nets, _ = load_checkpoint(args.attention_checkpoint)
        if "attention" not in nets:
            raise ValueError(f"{args.attention_checkpoint} holds no attention network")
        splits = load_splits(cfg)
        dataset = getattr(splits, args.split)
        count = min(args.count, len(dataset))
        pixels = torch.from_numpy(dataset.pixel_stack()[:count]).permute(0, 3, 1, 2)
        with torch.no_grad():
            _, maps = attend(pixels, nets["attention"])
        for i in range(count):
            path = report_dir / f"attention_map_{i:03d}.png"
            save_map_png(path, maps[i, 0])
            written.append(path)
    print(f"wrote {len(written)} image files to {report_dir}")
    return 0


def cmd_sweep(args) -> int:
    base = load_experiment_config(args.config)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out_root = Path(args.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = override_value(base, args.param, value)
        point_dir = out_root / f"{args.param.replace('.', '_')}_{value}"
        cfg = override_value(cfg, "output.dir", str(point_dir))
        point_dir.mkdir(parents=True, exist_ok=True)
        splits = load_splits(cfg)
        state = run_pipeline(splits.train, cfg.train, cfg.model, out_dir=point_dir)
        write_history_csv(point_dir / "loss_history.csv", state.history)
        query_codes = encode_final_many(splits.query.pixel_stack(), state.hash_net2)
        gallery_codes = encode_final_many(splits.gallery.pixel_stack(), state.hash_net2)
        packed_gallery = pack(gallery_codes)
        save_codes(point_dir / "query.dagh", pack(query_codes))
        save_codes(point_dir / "gallery.dagh", packed_gallery)
        relevance = relevance_matrix(splits.query.label_sets(), splits.gallery.label_sets())
        ns = [n for n in cfg.eval.top_ns if n <= packed_gallery.n]
        report = evaluate_codes(query_codes, packed_gallery, relevance, cfg.eval.cutoff, ns)
        report.extras = {"code_length": cfg.train.code_length, args.param: value}
        eval_dir = point_dir / "eval"
        eval_dir.mkdir(exist_ok=True)
        report.save_json(eval_dir / "report.json")
        report.save_curves_csv(eval_dir / "pr_curve.csv", eval_dir / "p_at_n.csv")
        rows.append({"value": value, "map": report.map, "p_at_h2": report.p_at_h2,
                     "dir": str(point_dir)})
    table_path = out_root / "sweep_results.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "map", "p_at_h2", "dir"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep of {args.param} over {values}:")
    for row in rows:
        print(f"  {args.param}={row['value']}: map={row['map']:.4f} p@h2={row['p_at_h2']:.4f}")
    print(f"table: {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aghash",
        description="attention-guided hashing: train, encode, rank, and evaluate binary codes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("-c", "--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a dataset split into a packed code file")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--split", choices=("train", "query", "gallery"), required=True)
    p.add_argument("--out", required=True, help="output code file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="rank a gallery for every query code")
    p.add_argument("--query-codes", required=True)
    p.add_argument("--gallery-codes", required=True)
    p.add_argument("--out", required=True, help="output ranking CSV")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", help="compute retrieval metrics for code files")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--query", required=True, help="query code file")
    p.add_argument("--gallery", required=True, help="gallery code file")
    p.add_argument("--labels", help="JSON with query/gallery label lists "
                                    "(default: the encode sidecars)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render metric plots (and attention maps) as images")
    p.add_argument("--report-dir", required=True)
    p.add_argument("--attention-checkpoint", help="stage-1 checkpoint to render attention maps")
    p.add_argument("-c", "--config", help="config (required with --attention-checkpoint)")
    p.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    p.add_argument("--count", type=int, default=4, help="attention maps to render")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("sweep", help="train/evaluate over a grid of one parameter")
    p.add_argument("-c", "--config", required=True, help="template config")
    p.add_argument("--param", required=True, help="dotted key, e.g. train.margin")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot" and args.attention_checkpoint and not args.config:
        _fail("--attention-checkpoint requires -c/--config")
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        _fail(str(exc))
        return 2
    except TrainingDivergenceError as exc:
        _fail(str(exc))
        return 4
    except (OSError, ValueError) as exc:
        _fail(str(exc))
        return 3


if __name__ == "__main__":
    sys.exit(main())
