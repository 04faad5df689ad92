"""Two-stage training: joint attention + hashing optimization under the
continuation schedule, extraction of attention-guided code targets, and
distillation of those targets into the final hashing network.

Both stages run SGD with momentum, weight decay, a 10x learning rate on the
code layer, and step decay. Runs are deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionConfig, AttentionNet, attend
from .datasets import Dataset, pair_batches
from .hashnet import (BetaSchedule, HashNet, HashNetConfig,
                      encode_attention_guided_many, save_checkpoint)
from .losses import atanh_penalty, attention_loss, guide_grad, guide_loss, semantic_loss

HISTORY_COLUMNS = ("epoch", "sem", "att", "penalty", "guide", "total")


class TrainingDivergenceError(RuntimeError):
    """Raised when a loss turns non-finite; surfaces instability instead of masking it."""

    def __init__(self, stage: int, epoch: int, component: str):
        super().__init__(f"non-finite {component} loss in stage {stage}, epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
        self.component = component


@dataclass(frozen=True)
class ModelConfig:
    """Architecture sizes for the attention and hashing networks."""

    attention_channels: int = 8
    conv_channels: tuple[int, ...] = (16, 32, 64)
    fc_dim: int = 128
    backbone: str = "small"


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for both training stages (defaults are the standard ones)."""

    code_length: int = 16
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 32
    lr: float = 0.01
    lr_fch_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    attention_weight: float = 50.0
    margin: float = 0.3
    atanh_reg: float = 0.001
    beta_growth: float = 2.0
    beta_max: float = 1024.0
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    seed: int = 0

    def beta_schedule(self) -> BetaSchedule:
        return BetaSchedule(growth=self.beta_growth, beta_max=self.beta_max)


@dataclass
class TrainState:
    """Everything a finished (or partial) pipeline run produced."""

    config: TrainConfig
    model: ModelConfig
    attention_net: AttentionNet | None = None
    hash_net1: HashNet | None = None
    hash_net2: HashNet | None = None
    beta_final: float = 1.0
    attention_targets: np.ndarray | None = None  # (N, K) {0,1}
    history: list[dict] = field(default_factory=list)


def _derived_seed(seed: int, role: int) -> int:
    """Independent deterministic stream seed for one role of one run."""
    return int(np.random.SeedSequence([seed, role]).generate_state(1)[0])


_ROLE_ATTENTION_INIT = 1
_ROLE_HASH1_INIT = 2
_ROLE_HASH2_INIT = 3
_ROLE_STAGE1_EPOCH = 1000
_ROLE_STAGE2_EPOCH = 2_000_000


def _epoch_lr(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch // config.lr_decay_every)


def _set_lr(optimizer, base_lr: float, fch_multiplier: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = base_lr * (fch_multiplier if group.get("is_fch") else 1.0)


def _nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()


def build_networks(image_shape, config: TrainConfig, model: ModelConfig):
    """Deterministically initialized attention net and both hashing nets."""
    attention = AttentionNet(AttentionConfig(tuple(image_shape), model.attention_channels))
    attention.reset_parameters(_derived_seed(config.seed, _ROLE_ATTENTION_INIT))
    hash_cfg = HashNetConfig(tuple(image_shape), config.code_length,
                             model.conv_channels, model.fc_dim, model.backbone)
    hash1 = HashNet(hash_cfg)
    hash1.reset_parameters(_derived_seed(config.seed, _ROLE_HASH1_INIT))
    hash2 = HashNet(hash_cfg)
    hash2.reset_parameters(_derived_seed(config.seed, _ROLE_HASH2_INIT))
    return attention, hash1, hash2


def train_stage1(dataset: Dataset, config: TrainConfig, model: ModelConfig = ModelConfig(),
                 networks: tuple[AttentionNet, HashNet] | None = None
                 ) -> tuple[AttentionNet, HashNet, list[dict]]:
    """Jointly optimize the attention and first hashing network.

    Per batch: compose attention images, push them through the hashing net,
    squash with tanh(beta * .), and descend the combined pairwise objective
    (normalized by pair count; raw sums are recoverable from the logged pair
    counts). Beta steps once per epoch along the schedule.
    """
    if len({label for s in dataset.samples for label in s.labels}) < 2:
        raise ValueError("stage-1 training needs at least 2 classes")
    if networks is not None:
        attention, hash1 = networks
    else:
        attention, hash1, _ = build_networks(dataset.image_shape, config, model)
    schedule = config.beta_schedule()
    optimizer = torch.optim.SGD(
        [
            {"params": list(attention.parameters())},
            {"params": list(hash1.backbone_parameters())},
            {"params": list(hash1.fch_parameters()), "is_fch": True},
        ],
        lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
    )
    history: list[dict] = []
    for epoch in range(config.epochs_stage1):
        beta = schedule.at_epoch(epoch)
        penalty = atanh_penalty(beta, config.atanh_reg)
        _set_lr(optimizer, _epoch_lr(config, epoch), config.lr_fch_multiplier)
        sem_sum = att_sum = 0.0
        pair_count = 0
        for batch in pair_batches(dataset, config.batch_size,
                                  _derived_seed(config.seed, _ROLE_STAGE1_EPOCH + epoch)):
            images = _nchw(batch.images)
            attended, _ = attend(images, attention)
            codes = torch.tanh(beta * hash1(attended))
            sem = semantic_loss(codes, batch.sim)
            att = attention_loss(codes, batch.sim, config.margin)
            n_pairs = len(batch) * (len(batch) - 1) // 2
            loss = (sem + config.attention_weight * att) / n_pairs + penalty
            for name, value in (("semantic", sem), ("attention", att), ("total", loss)):
                if not torch.isfinite(value):
                    raise TrainingDivergenceError(1, epoch, name)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sem_sum += float(sem.detach())
            att_sum += float(att.detach())
            pair_count += n_pairs
        sem_mean = sem_sum / pair_count
        att_mean = att_sum / pair_count
        history.append({
            "stage": 1, "epoch": epoch + 1, "sem": sem_mean, "att": att_mean,
            "penalty": penalty, "guide": None,
            "total": sem_mean + config.attention_weight * att_mean + penalty,
            "pairs": pair_count, "beta": beta, "lr": _epoch_lr(config, epoch),
        })
    return attention, hash1, history


def extract_attention_codes(dataset: Dataset, attention_net: AttentionNet,
                            hash_net: HashNet) -> np.ndarray:
    """Attention-guided {0,1} code targets for every image, in id order.

    The -1 bits of the signed codes become 0 so they can drive the per-bit
    cross-entropy of the second stage.
    """
    signed = encode_attention_guided_many(dataset.pixel_stack(), attention_net, hash_net)
    return ((signed + 1) // 2).astype(np.uint8)


def train_stage2(dataset: Dataset, targets: np.ndarray, config: TrainConfig,
                 model: ModelConfig = ModelConfig(),
                 network: HashNet | None = None) -> tuple[HashNet, list[dict]]:
    """Train the second hashing network to reproduce the {0,1} code targets.

    Uses the analytic cross-entropy gradient (sigmoid(y) - b) / (K * B) as
    the backward seed of the code outputs, i.e. plain backprop with the
    hand-derived derivative.
    """
    targets = np.asarray(targets)
    if targets.shape != (len(dataset), config.code_length):
        raise ValueError(
            f"targets shape {targets.shape} != ({len(dataset)}, {config.code_length})"
        )
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("targets must be binary")
    if network is not None:
        hash2 = network
    else:
        _, _, hash2 = build_networks(dataset.image_shape, config, model)
    optimizer = torch.optim.SGD(
        [
            {"params": list(hash2.backbone_parameters())},
            {"params": list(hash2.fch_parameters()), "is_fch": True},
        ],
        lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay,
    )
    pixels = dataset.pixel_stack()
    target_tensor = torch.from_numpy(targets.astype(np.float32))
    history: list[dict] = []
    for epoch in range(config.epochs_stage2):
        _set_lr(optimizer, _epoch_lr(config, epoch), config.lr_fch_multiplier)
        rng = np.random.default_rng(_derived_seed(config.seed, _ROLE_STAGE2_EPOCH + epoch))
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = order[start: start + config.batch_size]
            logits = hash2(_nchw(pixels[chunk]))
            batch_targets = target_tensor[chunk]
            loss = guide_loss(logits.detach(), batch_targets)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(2, epoch, "guide")
            optimizer.zero_grad()
            logits.backward(gradient=guide_grad(logits, batch_targets))
            optimizer.step()
            loss_sum += float(loss) * logits.numel()
        guide_mean = loss_sum / targets.size
        history.append({
            "stage": 2, "epoch": epoch + 1, "sem": None, "att": None, "penalty": None,
            "guide": guide_mean, "total": guide_mean,
            "pairs": None, "beta": None, "lr": _epoch_lr(config, epoch),
        })
    return hash2, history


def run_pipeline(dataset: Dataset, config: TrainConfig, model: ModelConfig = ModelConfig(),
                 out_dir=None) -> TrainState:
    """Full two-stage run; checkpoints after each stage when out_dir is given.

    If stage 2 diverges, the stage-1 checkpoint is already on disk.
    """
    state = TrainState(config=config, model=model)
    attention, hash1, history1 = train_stage1(dataset, config, model)
    state.attention_net, state.hash_net1 = attention, hash1
    state.beta_final = config.beta_schedule().at_epoch(config.epochs_stage1)
    state.history.extend(history1)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage1",
                        {"attention": attention, "hash1": hash1},
                        meta={"stage": 1, "epochs": config.epochs_stage1,
                              "beta": state.beta_final, "seed": config.seed,
                              "code_length": config.code_length})
    state.attention_targets = extract_attention_codes(dataset, attention, hash1)
    hash2, history2 = train_stage2(dataset, state.attention_targets, config, model)
    state.hash_net2 = hash2
    for row in history2:
        row = dict(row)
        row["epoch"] += config.epochs_stage1
        state.history.append(row)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "stage2", {"hash2": hash2},
                        meta={"stage": 2, "epochs": config.epochs_stage2,
                              "seed": config.seed, "code_length": config.code_length})
    return state


def write_history_csv(path, history: list[dict]) -> None:
    """Loss history as CSV with columns epoch, sem, att, penalty, guide, total."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(["" if row.get(c) is None else row[c] for c in HISTORY_COLUMNS])


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append({
                k: (None if v == "" else (int(v) if k == "epoch" else float(v)))
                for k, v in raw.items()
            })
        return rows
