"""Retrieval evaluation metrics over binary codes.

All metrics rank the gallery by Hamming distance (ties by ascending gallery
id) and score against binary relevance judgements. Relevance is given either
as an (n_queries, n_gallery) {0,1} matrix or as a callable
(query_index, gallery_id) -> {0,1}.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import pairwise_label
from .retrieval import PackedCodes, RankingResult, rank_gallery, within_radius


def relevance_matrix(query_labels, gallery_labels) -> np.ndarray:
    """Build the {0,1} relevance matrix from per-item label sets.

    A gallery item is relevant to a query iff their label sets intersect.
    """
    mat = np.zeros((len(query_labels), len(gallery_labels)), dtype=np.int8)
    for i, ql in enumerate(query_labels):
        for j, gl in enumerate(gallery_labels):
            mat[i, j] = pairwise_label(ql, gl)
    return mat


def _relevance_row(relevance, qi: int, n_gallery: int) -> np.ndarray:
    if callable(relevance):
        return np.array([relevance(qi, gid) for gid in range(n_gallery)], dtype=np.int8)
    return np.asarray(relevance)[qi].astype(np.int8)


def _query_matrix(queries) -> np.ndarray:
    mat = np.asarray(queries)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.shape[0] == 0:
        raise ValueError("empty query set")
    return mat


def average_precision(ranking: RankingResult, relevance, cutoff: int) -> float:
    """Truncated average precision of one ranking.

    AP@cutoff = sum_{i<=cutoff} Precision(i) * rel(i) / min(total_relevant, cutoff),
    where total_relevant counts relevant items in the whole gallery. Returns
    0.0 when no relevant items exist.

    `relevance` maps gallery id -> {0,1}; accepts an array indexed by id or
    a callable.
    """
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    if callable(relevance):
        rel_by_id = np.array(
            [relevance(g) for g in range(len(ranking.gallery_ids))], dtype=np.int8
        )
    else:
        rel_by_id = np.asarray(relevance).astype(np.int8)
    total_relevant = int(rel_by_id.sum())
    if total_relevant == 0:
        return 0.0
    rel_ranked = rel_by_id[ranking.gallery_ids[:cutoff]]
    hits = np.cumsum(rel_ranked)
    ranks = np.arange(1, len(rel_ranked) + 1)
    ap = float((hits / ranks * rel_ranked).sum()) / min(total_relevant, cutoff)
    return ap


def mean_average_precision(queries, gallery: PackedCodes, relevance, cutoff: int) -> float:
    """Mean of AP@cutoff over all queries.

    `queries` is an (n_q, K) {-1,+1} array (or a single code); `relevance`
    an (n_q, n_gallery) matrix or callable (qi, gid) -> {0,1}.
    """
    qmat = _query_matrix(queries)
    aps = []
    for qi in range(qmat.shape[0]):
        ranking = rank_gallery(qmat[qi], gallery, query_id=qi)
        rel = _relevance_row(relevance, qi, gallery.n)
        aps.append(average_precision(ranking, rel, cutoff))
    return float(np.mean(aps))


def precision_at_hamming2(queries, gallery: PackedCodes, relevance) -> float:
    """Mean precision over items retrieved within Hamming radius 2.

    A query retrieving nothing inside the radius contributes precision 0.
    """
    qmat = _query_matrix(queries)
    precisions = []
    for qi in range(qmat.shape[0]):
        ids = sorted(within_radius(qmat[qi], gallery, 2))
        if not ids:
            precisions.append(0.0)
            continue
        rel = _relevance_row(relevance, qi, gallery.n)
        precisions.append(float(rel[ids].sum()) / len(ids))
    return float(np.mean(precisions))


def pr_curve(queries, gallery: PackedCodes, relevance) -> list[tuple[float, float]]:
    """Rank-sweep precision-recall curve, one point per depth 1..n_gallery.

    Precision and recall are averaged over queries that have at least one
    relevant gallery item; queries with none are skipped (their recall is
    undefined). No interpolation is applied.
    """
    qmat = _query_matrix(queries)
    per_query = []
    for qi in range(qmat.shape[0]):
        rel = _relevance_row(relevance, qi, gallery.n)
        total = int(rel.sum())
        if total == 0:
            continue
        ranking = rank_gallery(qmat[qi], gallery, query_id=qi)
        hits = np.cumsum(rel[ranking.gallery_ids])
        depths = np.arange(1, gallery.n + 1)
        per_query.append((hits / depths, hits / total))
    if not per_query:
        raise ValueError("no query has a relevant gallery item")
    precision = np.mean([p for p, _ in per_query], axis=0)
    recall = np.mean([r for _, r in per_query], axis=0)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def precision_at_topn(queries, gallery: PackedCodes, relevance, ns) -> list[tuple[int, float]]:
    """Mean fraction of relevant items among the top n, for each n in ns."""
    ns = list(ns)
    for n in ns:
        if not 1 <= n <= gallery.n:
            raise ValueError(f"n={n} outside [1, {gallery.n}]")
    qmat = _query_matrix(queries)
    hits_at = np.zeros((qmat.shape[0], gallery.n))
    for qi in range(qmat.shape[0]):
        ranking = rank_gallery(qmat[qi], gallery, query_id=qi)
        rel = _relevance_row(relevance, qi, gallery.n)
        hits_at[qi] = np.cumsum(rel[ranking.gallery_ids])
    return [(n, float(np.mean(hits_at[:, n - 1] / n))) for n in ns]


def bit_correlation(codes) -> np.ndarray:
    """Pearson correlation between bit columns of a code gallery.

    Zero-variance columns get 0 off-diagonal and 1 on the diagonal instead
    of NaN. High absolute off-diagonal values flag redundant bits.
    """
    mat = np.asarray(codes, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValueError("need at least 2 codes")
    k = mat.shape[1]
    centered = mat - mat.mean(axis=0)
    std = centered.std(axis=0)
    live = std > 0
    corr = np.zeros((k, k))
    if live.any():
        sub = centered[:, live] / std[live]
        corr[np.ix_(live, live)] = (sub.T @ sub) / mat.shape[0]
    np.fill_diagonal(corr, 1.0)
    return corr


def mean_abs_off_diagonal(matrix: np.ndarray) -> float:
    """Mean absolute value of the off-diagonal entries of a square matrix."""
    k = matrix.shape[0]
    if k < 2:
        return 0.0
    mask = ~np.eye(k, dtype=bool)
    return float(np.abs(matrix[mask]).mean())


@dataclass
class EvalReport:
    """All retrieval metrics for one query/gallery evaluation."""

    map: float
    p_at_h2: float
    pr_curve: list[tuple[float, float]]
    p_at_n: list[tuple[int, float]]
    bit_correlation: np.ndarray
    encode_us_per_image: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "p_at_h2": self.p_at_h2,
            "pr_curve": [[r, p] for r, p in self.pr_curve],
            "p_at_n": [[n, p] for n, p in self.p_at_n],
            "bit_correlation": self.bit_correlation.tolist(),
            "mean_abs_bit_correlation": mean_abs_off_diagonal(self.bit_correlation),
            "encode_us_per_image": self.encode_us_per_image,
            "extras": self.extras,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_curves_csv(self, pr_path, pn_path) -> None:
        with open(pr_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["recall", "precision"])
            writer.writerows(self.pr_curve)
        with open(pn_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "precision"])
            writer.writerows(self.p_at_n)


def evaluate_codes(queries, gallery: PackedCodes, relevance, cutoff: int, ns) -> EvalReport:
    """Compute the full metric suite for one query set against one gallery."""
    from .retrieval import unpack

    return EvalReport(
        map=mean_average_precision(queries, gallery, relevance, cutoff),
        p_at_h2=precision_at_hamming2(queries, gallery, relevance),
        pr_curve=pr_curve(queries, gallery, relevance),
        p_at_n=precision_at_topn(queries, gallery, relevance, ns),
        bit_correlation=bit_correlation(unpack(gallery)),
    )
