"""Training losses: pairwise semantic loss, attention margin loss, the
combined first-stage objective, and the guide loss with its analytic
gradient.

All functions accept numpy arrays or torch tensors and return torch scalars
(or tensors), so they differentiate when fed grad-tracking tensors. Pair sums
run over unordered pairs i < j; self-pairs are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def _as_tensor(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    return t.double() if not t.is_floating_point() else t


def _check_binary(mat: torch.Tensor, name: str) -> None:
    if not bool(((mat == 0) | (mat == 1)).all()):
        raise ValueError(f"{name} entries must be 0 or 1")


def half_inner_product(a, b) -> torch.Tensor:
    """Halved inner product (1/2) * sum_k a_k b_k of two equal-length codes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"codes must be equal-length vectors, got {a.shape} vs {b.shape}")
    return 0.5 * (a * b).sum()


def _pair_indices(n: int):
    return torch.triu_indices(n, n, offset=1)


def semantic_loss(codes, sim) -> torch.Tensor:
    """Negative log likelihood of pairwise similarity under relaxed codes.

    For theta_ij = (1/2) w_i . w_j, sums log(1 + exp(theta_ij)) - s_ij * theta_ij
    over unordered pairs i < j. Uses softplus so large |theta| cannot
    overflow. Similar pairs are pushed toward large theta, dissimilar pairs
    toward small.
    """
    codes, sim = _as_tensor(codes), _as_tensor(sim)
    if codes.ndim != 2:
        raise ValueError(f"codes must be (B, K), got {tuple(codes.shape)}")
    n = codes.shape[0]
    if sim.shape != (n, n):
        raise ValueError(f"sim must be ({n}, {n}), got {tuple(sim.shape)}")
    _check_binary(sim, "sim")
    theta = 0.5 * (codes @ codes.T)
    iu, ju = _pair_indices(n)
    th = theta[iu, ju]
    return (F.softplus(th) - sim[iu, ju].to(th.dtype) * th).sum()


def attention_loss(codes, sim, margin: float) -> torch.Tensor:
    """Margin loss steering pairwise cosine similarity toward the labels.

    With c_ij = (cos(w_i, w_j) + 1) / 2 and d = |s_ij - c_ij|, each unordered
    pair contributes d + max(0, margin - d). The hinge keeps a floor of
    `margin` on already-matched pairs, which regularizes the attention
    network rather than rewarding saturation.
    """
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    codes, sim = _as_tensor(codes), _as_tensor(sim)
    if codes.ndim != 2:
        raise ValueError(f"codes must be (B, K), got {tuple(codes.shape)}")
    n = codes.shape[0]
    if sim.shape != (n, n):
        raise ValueError(f"sim must be ({n}, {n}), got {tuple(sim.shape)}")
    _check_binary(sim, "sim")
    norms = codes.norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm code row: cosine similarity undefined")
    unit = codes / norms[:, None]
    c = (unit @ unit.T + 1.0) / 2.0
    iu, ju = _pair_indices(n)
    d = (sim[iu, ju].to(c.dtype) - c[iu, ju]).abs()
    return (d + (margin - d).clamp(min=0)).sum()


def atanh_penalty(beta: float, reg: float) -> float:
    """Scalar regularizer reg * (1/beta)^2 logged alongside the stage-1 loss.

    Constant w.r.t. codes and parameters, so it never contributes gradient;
    it shrinks as the continuation sharpens.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if reg < 0:
        raise ValueError(f"reg must be >= 0, got {reg}")
    return reg / (beta * beta)


@dataclass
class LossValue:
    """A combined loss with its named sub-terms (live tensors)."""

    value: torch.Tensor
    components: dict[str, torch.Tensor]


def stage1_loss(codes, sim, attention_weight: float, margin: float,
                beta: float, reg: float) -> LossValue:
    """First-stage objective: semantic + attention_weight * attention + penalty.

    `codes` are the continuation activations of one batch, `sim` its pairwise
    similarity matrix. Values are raw pair sums; the trainer normalizes by
    pair count separately.
    """
    if attention_weight < 0:
        raise ValueError(f"attention_weight must be >= 0, got {attention_weight}")
    codes = _as_tensor(codes)
    sem = semantic_loss(codes, sim)
    att = attention_loss(codes, sim, margin)
    penalty = torch.tensor(atanh_penalty(beta, reg), dtype=sem.dtype)
    return LossValue(
        value=sem + attention_weight * att + penalty,
        components={"sem": sem, "att": att, "penalty": penalty},
    )


def guide_loss(logits, targets) -> torch.Tensor:
    """Mean per-bit sigmoid cross-entropy against {0,1} code targets.

    Computed in logits form, softplus(y) - b * y averaged over all N * K
    entries, so |y| up to hundreds cannot overflow.
    """
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    _check_binary(targets, "targets")
    return (F.softplus(logits) - targets.to(logits.dtype) * logits).mean()


def guide_grad(logits, targets) -> torch.Tensor:
    """Analytic gradient of guide_loss w.r.t. the logits.

    d/dy of mean softplus(y) - b*y is (sigmoid(y) - b) / (K * N). The sign is
    the one finite differences of guide_loss confirm.
    """
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    _check_binary(targets, "targets")
    with torch.no_grad():
        return (torch.sigmoid(logits) - targets.to(logits.dtype)) / logits.numel()
