"""Experiment configuration: a flat INI file with strict, typed sections.

Unknown sections or keys are rejected so sweep configs cannot silently
misspell a hyper-parameter. Defaults are the standard training values; a
config file only needs the keys it overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .datasets import DatasetSplits, SplitSpec, load_cifar10, synthetic_splits
from .trainer import ModelConfig, TrainConfig

OUTPUT_DIR_ENV = "AGHASH_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" or "cifar10"
    dir: str | None = None
    n_classes: int = 4
    train_per_class: int = 50
    query_per_class: int = 10
    gallery_per_class: int | None = 50
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 3
    noise_level: float = 0.2
    seed: int = 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_height, self.image_width, self.image_channels)


@dataclass(frozen=True)
class EvalConfig:
    cutoff: int = 5000
    top_ns: tuple[int, ...] = (1, 5, 10, 50, 100)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    output_dir: str = "runs/default"

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV, self.output_dir))

    def to_snapshot(self) -> dict:
        """JSON-serializable copy of every setting, embedded in run manifests."""
        return {
            "dataset": dataclasses.asdict(self.dataset),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "eval": dataclasses.asdict(self.eval),
            "output_dir": self.output_dir,
        }


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace(" ", "").split(",") if part)


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "rest", "none") else int(text)


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# field name -> parser, where plain int/float/str don't suffice
_SPECIAL_PARSERS = {
    ("model", "conv_channels"): _parse_int_tuple,
    ("eval", "top_ns"): _parse_int_tuple,
    ("dataset", "gallery_per_class"): _optional_int,
}


def _parse_field(section: str, fld: dataclasses.Field, raw: str):
    parser = _SPECIAL_PARSERS.get((section, fld.name))
    if parser is not None:
        return parser(raw)
    if fld.type in ("int", int):
        return int(raw)
    if fld.type in ("float", float):
        return float(raw)
    return raw


def load_experiment_config(path) -> ExperimentConfig:
    """Load and validate an INI experiment config."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    sections: dict[str, object] = {}
    code_length: int | None = None
    output_dir = ExperimentConfig().output_dir
    for section in parser.sections():
        if section == "output":
            extra = set(parser["output"]) - {"dir"}
            if extra:
                raise ConfigError(f"unknown keys in [output]: {sorted(extra)}")
            output_dir = parser["output"].get("dir", output_dir)
            continue
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTION_TYPES[section]
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser[section].items():
            if section == "model" and key == "code_length":
                # the code length belongs to the model section of config files
                # but rides on the training config internally
                try:
                    code_length = int(raw)
                except ValueError as exc:
                    raise ConfigError(f"[model] code_length = {raw!r}: {exc}") from exc
                continue
            if section == "train" and key == "code_length":
                raise ConfigError("code_length belongs in [model], not [train]")
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[key] = _parse_field(section, known[key], raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
        sections[section] = cls(**values)

    train = sections.get("train", TrainConfig())
    if code_length is not None:
        train = dataclasses.replace(train, code_length=code_length)
    cfg = ExperimentConfig(
        dataset=sections.get("dataset", DatasetConfig()),
        model=sections.get("model", ModelConfig()),
        train=train,
        eval=sections.get("eval", EvalConfig()),
        output_dir=output_dir,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind not in ("synthetic", "cifar10"):
        raise ConfigError(f"dataset.kind must be synthetic or cifar10, got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "cifar10" and not cfg.dataset.dir:
        raise ConfigError("dataset.dir is required for kind = cifar10")
    if cfg.train.batch_size < 2:
        raise ConfigError("train.batch_size must be >= 2")
    if cfg.train.code_length < 1:
        raise ConfigError("model.code_length must be >= 1")
    for name in ("epochs_stage1", "epochs_stage2"):
        if getattr(cfg.train, name) < 0:
            raise ConfigError(f"train.{name} must be >= 0")
    if cfg.model.backbone not in ("small", "alexnet"):
        raise ConfigError(f"model.backbone must be small or alexnet, got {cfg.model.backbone!r}")
    if cfg.eval.cutoff < 1:
        raise ConfigError("eval.cutoff must be >= 1")


def override_value(cfg: ExperimentConfig, dotted_key: str, raw: str) -> ExperimentConfig:
    """Return a copy of cfg with one `section.key` replaced (sweep helper)."""
    try:
        section, key = dotted_key.split(".", 1)
    except ValueError:
        raise ConfigError(f"override key must look like section.key, got {dotted_key!r}")
    if section == "output" and key == "dir":
        return dataclasses.replace(cfg, output_dir=raw)
    if dotted_key in ("model.code_length", "train.code_length"):
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{dotted_key} = {raw!r}: {exc}") from exc
        new = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, code_length=value))
        _validate(new)
        return new
    if section not in _SECTION_TYPES:
        raise ConfigError(f"unknown config section [{section}]")
    cls = _SECTION_TYPES[section]
    known = {f.name: f for f in dataclasses.fields(cls)}
    if key not in known:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    value = _parse_field(section, known[key], raw)
    replaced = dataclasses.replace(getattr(cfg, section), **{key: value})
    new = dataclasses.replace(cfg, **{section: replaced})
    _validate(new)
    return new


def load_splits(cfg: ExperimentConfig) -> DatasetSplits:
    """Materialize train/query/gallery sets for the configured dataset."""
    ds = cfg.dataset
    if ds.kind == "synthetic":
        if ds.gallery_per_class is None:
            raise ConfigError("dataset.gallery_per_class is required for synthetic data")
        return synthetic_splits(ds.n_classes, ds.train_per_class, ds.query_per_class,
                                ds.gallery_per_class, ds.image_shape, ds.noise_level, ds.seed)
    return load_cifar10(ds.dir, SplitSpec(ds.train_per_class, ds.query_per_class,
                                          ds.gallery_per_class, ds.seed))
