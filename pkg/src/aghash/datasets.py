"""Dataset ingestion, synthetic data generation, and pair-batch streaming.

Images are H x W x C float arrays with values in [0, 1]; every sample carries
a non-empty set of class labels. Two images count as similar iff their label
sets intersect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

SPLITS = ("train", "query", "gallery")

CIFAR_SHAPE = (32, 32, 3)
_CIFAR_RECORD = 1 + 32 * 32 * 3
_CIFAR_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]


def pairwise_label(labels_a, labels_b) -> int:
    """1 if the two label sets share at least one label, else 0.

    Single-label items are the singleton special case. Symmetric in its
    arguments.
    """
    if not labels_a or not labels_b:
        raise ValueError("label sets must be non-empty")
    return 1 if set(labels_a) & set(labels_b) else 0


@dataclass(frozen=True)
class ImageSample:
    """One image with its integer id and label set."""

    id: int
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1]
    labels: frozenset[int]

    def __post_init__(self):
        if not self.labels:
            raise ValueError(f"sample {self.id}: labels must be non-empty")
        if self.pixels.ndim != 3:
            raise ValueError(f"sample {self.id}: pixels must be H x W x C")
        if not np.isfinite(self.pixels).all():
            raise ValueError(f"sample {self.id}: non-finite pixel values")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError(f"sample {self.id}: pixel values outside [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of samples from one split."""

    samples: tuple[ImageSample, ...]
    split: str
    image_shape: tuple[int, int, int]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for i, s in enumerate(self.samples):
            if s.id != i:
                raise ValueError(f"sample ids must be contiguous from 0; got {s.id} at {i}")
            if s.pixels.shape != self.image_shape:
                raise ValueError(
                    f"sample {s.id} shape {s.pixels.shape} != dataset shape {self.image_shape}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def pixel_stack(self) -> np.ndarray:
        """All images as one (N, H, W, C) float32 array in id order."""
        return np.stack([s.pixels for s in self.samples]).astype(np.float32)

    def label_sets(self) -> list[frozenset[int]]:
        return [s.labels for s in self.samples]


class DatasetSplits(NamedTuple):
    train: Dataset
    query: Dataset
    gallery: Dataset


def _from_arrays(pixels: np.ndarray, labels, split: str) -> Dataset:
    samples = tuple(
        ImageSample(id=i, pixels=np.ascontiguousarray(pixels[i], dtype=np.float32),
                    labels=frozenset(labels[i]) if not isinstance(labels[i], int) else frozenset({labels[i]}))
        for i in range(pixels.shape[0])
    )
    return Dataset(samples=samples, split=split, image_shape=tuple(pixels.shape[1:]))


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_PALETTE = [
    (0.95, 0.25, 0.25),
    (0.25, 0.95, 0.25),
    (0.25, 0.35, 0.95),
    (0.95, 0.90, 0.25),
    (0.90, 0.25, 0.90),
    (0.25, 0.90, 0.90),
    (0.95, 0.60, 0.20),
    (0.60, 0.25, 0.95),
]
_CENTERS = [(0.30, 0.30), (0.70, 0.70), (0.30, 0.70), (0.70, 0.30),
            (0.50, 0.50), (0.30, 0.50), (0.70, 0.50), (0.50, 0.30), (0.50, 0.70)]
_KINDS = ("square", "disk", "cross", "ring", "hbars", "vbars")


def _patch_mask(class_id: int, height: int, width: int) -> np.ndarray:
    """Boolean saliency mask for one class: a distinct shape at a distinct spot."""
    cy, cx = _CENTERS[class_id % len(_CENTERS)]
    cy, cx = cy * height, cx * width
    radius = max(2.0, min(height, width) / 5.0)
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - cy, xx - cx
    kind = _KINDS[class_id % len(_KINDS)]
    if kind == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "disk":
        return dy * dy + dx * dx <= radius * radius
    if kind == "cross":
        arm = max(1.0, radius / 2.5)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= radius))
    if kind == "ring":
        rr = dy * dy + dx * dx
        return (rr <= radius * radius) & (rr >= (radius * 0.5) ** 2)
    if kind == "hbars":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius) & (yy % 4 < 2)
    return (np.abs(dy) <= radius) & (np.abs(dx) <= radius) & (xx % 4 < 2)


def class_template(class_id: int, image_shape) -> np.ndarray:
    """Noise-free prototype image for a synthetic class.

    Dark background with a bright class-specific patch; geometry depends only
    on the class id, so every split shares the same class semantics.
    """
    height, width, channels = image_shape
    color = np.resize(_PALETTE[class_id % len(_PALETTE)], channels)
    template = np.full((height, width, channels), 0.10, dtype=np.float32)
    template[_patch_mask(class_id, height, width)] = color
    return template


def generate_synthetic(n_classes: int, per_class: int, image_shape=(32, 32, 3),
                       noise_level: float = 0.2, seed: int = 0,
                       split: str = "train") -> Dataset:
    """Desk-scale labelled image set with class-distinctive salient patches.

    Each sample is a convex blend of its class template and uniform noise:
    (1 - noise_level) * template + noise_level * U[0,1), so pixels stay in
    [0, 1]. Deterministic for a fixed seed.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if per_class < 2:
        raise ValueError(f"per_class must be >= 2, got {per_class}")
    if not 0.0 <= noise_level <= 1.0:
        raise ValueError(f"noise_level must be in [0, 1], got {noise_level}")
    rng = np.random.default_rng(seed)
    templates = [class_template(c, image_shape) for c in range(n_classes)]
    pixels, labels = [], []
    for c in range(n_classes):
        noise = rng.random((per_class,) + tuple(image_shape), dtype=np.float32)
        pixels.append((1.0 - noise_level) * templates[c] + noise_level * noise)
        labels.extend([c] * per_class)
    return _from_arrays(np.concatenate(pixels), labels, split)


def synthetic_splits(n_classes: int, train_per_class: int, query_per_class: int,
                     gallery_per_class: int, image_shape=(32, 32, 3),
                     noise_level: float = 0.2, seed: int = 0) -> DatasetSplits:
    """Train/query/gallery synthetic sets drawing from the same classes.

    Splits use disjoint noise streams (seed, seed+1, seed+2) but identical
    class templates, so cross-split similarity is meaningful.
    """
    return DatasetSplits(
        train=generate_synthetic(n_classes, train_per_class, image_shape,
                                 noise_level, seed, split="train"),
        query=generate_synthetic(n_classes, query_per_class, image_shape,
                                 noise_level, seed + 1, split="query"),
        gallery=generate_synthetic(n_classes, gallery_per_class, image_shape,
                                   noise_level, seed + 2, split="gallery"),
    )


def save_dataset(directory, dataset: Dataset) -> None:
    """Persist a dataset as manifest.json + raw little-endian float32 pixels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "count": len(dataset),
        "image_shape": list(dataset.image_shape),
        "split": dataset.split,
        "labels": [sorted(s.labels) for s in dataset.samples],
        "pixel_file": "pixels.f32",
        "pixel_dtype": "float32-le",
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh)
    dataset.pixel_stack().astype("<f4").tofile(directory / "pixels.f32")


def load_dataset(directory) -> Dataset:
    """Load a dataset saved by save_dataset()."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    shape = tuple(manifest["image_shape"])
    count = manifest["count"]
    raw = np.fromfile(directory / manifest["pixel_file"], dtype="<f4")
    expected = count * int(np.prod(shape))
    if raw.size != expected:
        raise OSError(
            f"{directory / manifest['pixel_file']}: has {raw.size} floats, expected {expected}"
        )
    pixels = raw.reshape((count,) + shape)
    return _from_arrays(pixels, manifest["labels"], manifest["split"])


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Per-class split sizes for a labelled store.

    gallery_per_class None means "all remaining images". Defaults follow the
    standard protocol: 100 query and 500 train images per category, the rest
    as gallery.
    """

    train_per_class: int = 500
    query_per_class: int = 100
    gallery_per_class: int | None = None
    seed: int = 0


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise OSError(f"{path}: size {raw.size} is not a multiple of {_CIFAR_RECORD}")
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels.astype(np.float32) / 255.0, labels


def load_cifar10(directory, split_spec: SplitSpec = SplitSpec()) -> DatasetSplits:
    """Load CIFAR-10 binary batch files and split them per class.

    Reads every data_batch_*.bin / test_batch.bin present under `directory`
    (3073-byte records: 1 label byte + 3072 pixel bytes, per-channel
    row-major) and scales pixels to [0, 1]. Selection within each class is a
    seeded shuffle: first query_per_class images become queries, the next
    train_per_class the training set, the rest (or gallery_per_class) the
    gallery.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"CIFAR-10 directory not found: {directory}")
    files = [directory / name for name in _CIFAR_FILES if (directory / name).exists()]
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 batch files (*.bin) in {directory}")
    parts = [_read_cifar_file(f) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])

    rng = np.random.default_rng(split_spec.seed)
    idx_train, idx_query, idx_gallery = [], [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(members.size)]
        need = split_spec.query_per_class + split_spec.train_per_class
        if members.size < need:
            raise ValueError(
                f"class {cls} has {members.size} images, needs >= {need} for the split"
            )
        idx_query.extend(members[: split_spec.query_per_class])
        idx_train.extend(members[split_spec.query_per_class: need])
        rest = members[need:]
        if split_spec.gallery_per_class is not None:
            if rest.size < split_spec.gallery_per_class:
                raise ValueError(
                    f"class {cls} has {rest.size} gallery candidates, "
                    f"needs {split_spec.gallery_per_class}"
                )
            rest = rest[: split_spec.gallery_per_class]
        idx_gallery.extend(rest)

    def build(indices, split):
        indices = np.sort(np.asarray(indices))
        return _from_arrays(pixels[indices], [int(l) for l in labels[indices]], split)

    return DatasetSplits(
        train=build(idx_train, "train"),
        query=build(idx_query, "query"),
        gallery=build(idx_gallery, "gallery"),
    )


# ---------------------------------------------------------------------------
# Pair batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairBatch:
    """A batch of images where every pair (i, j) carries a similarity bit."""

    ids: np.ndarray  # (B,) dataset sample ids
    images: np.ndarray  # (B, H, W, C) float32
    labels: tuple[frozenset[int], ...]
    sim: np.ndarray  # (B, B) int8, symmetric, unit diagonal

    def __len__(self) -> int:
        return self.ids.shape[0]


def similarity_matrix(label_sets) -> np.ndarray:
    """Pairwise shared-label matrix; diagonal is 1 (an image matches itself)."""
    n = len(label_sets)
    sim = np.eye(n, dtype=np.int8)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = pairwise_label(label_sets[i], label_sets[j])
    return sim


def pair_batches(dataset: Dataset, batch_size: int, seed: int) -> Iterator[PairBatch]:
    """One epoch of pair batches: a seeded permutation chunked into batches.

    Every two images inside a batch form a pair. A trailing batch is kept if
    it still has >= 2 samples (a 1-image batch has no pairs) and dropped
    otherwise.
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    pixels = dataset.pixel_stack()
    label_sets = dataset.label_sets()
    for start in range(0, len(order), batch_size):
        chunk = order[start: start + batch_size]
        if chunk.size < 2:
            break
        labels = tuple(label_sets[i] for i in chunk)
        yield PairBatch(
            ids=chunk.astype(np.int64),
            images=pixels[chunk],
            labels=labels,
            sim=similarity_matrix(labels),
        )
