"""Long-tailed dataset construction, balanced carving, synthetic data, CIFAR-10 ingestion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import read_container, write_container

CIFAR_RECORD = 3073
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LongTailSpec:
    classes: int
    n_max: int
    rho: float
    seed: int = 0

    @property
    def mu(self) -> float:
        return 1.0 / self.rho


def class_counts(spec: LongTailSpec) -> list[int]:
    """n_i = round(n_max * mu^(i/(C-1))) for i = 0..C-1, at least 1."""
    C, n_max, rho = spec.classes, spec.n_max, spec.rho
    if C < 2:
        raise ValueError(f"need at least 2 classes for a long-tail profile, got {C}")
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    if not rho >= 1:
        raise ValueError(f"imbalance factor rho must be >= 1, got {rho}")
    mu = 1.0 / rho
    return [max(1, int(round(n_max * mu ** (i / (C - 1))))) for i in range(C)]


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def carve_validation(
    source: LabeledDataset, total: int, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Remove a class-balanced set of ``total`` samples; returns (carved, remainder)."""
    C = source.num_classes
    if total % C:
        raise DataError(f"validation total {total} is not divisible by {C} classes")
    per = total // C
    rng = np.random.default_rng(seed)
    chosen = []
    for c, idx in enumerate(source.class_indices()):
        if len(idx) < per:
            raise DataError(f"class {c} has {len(idx)} samples, needs {per} for validation")
        chosen.append(np.sort(rng.permutation(idx)[:per]))
    taken = np.sort(np.concatenate(chosen))
    mask = np.ones(len(source), dtype=bool)
    mask[taken] = False
    return source.subset(taken), source.subset(np.flatnonzero(mask))


def longtail_indices(source: LabeledDataset, spec: LongTailSpec) -> np.ndarray:
    if spec.classes != source.num_classes:
        raise DataError(f"spec has {spec.classes} classes, dataset has {source.num_classes}")
    rng = np.random.default_rng(spec.seed)
    keep = []
    for c, (idx, n) in enumerate(zip(source.class_indices(), class_counts(spec))):
        if len(idx) < n:
            raise DataError(f"class {c} has {len(idx)} samples, long-tail profile needs {n}")
        keep.append(rng.permutation(idx)[:n])
    return np.sort(np.concatenate(keep))


def make_longtail(source: LabeledDataset, spec: LongTailSpec) -> LabeledDataset:
    """Subsample to exactly ``class_counts(spec)`` per class, class 0 as head."""
    return source.subset(longtail_indices(source, spec))


@dataclass(frozen=True)
class GaussianMixSpec:
    classes: int
    dim: int
    samples_per_class: int
    cov_scale: float = 1.0
    separation: float = 3.0
    means: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0
    # draws fresh samples around the same means (e.g. a held-out test set)
    noise_seed: int | None = None

    def __post_init__(self):
        if not self.cov_scale > 0:
            raise ValueError("cov_scale must be positive")

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (self.classes, self.dim):
                raise ValueError(f"means must be [{self.classes}, {self.dim}], got {m.shape}")
        else:
            # separate stream so changing sample counts does not move the means
            rng = np.random.default_rng([self.seed, 7919])
            m = rng.normal(0.0, 1.0, (self.classes, self.dim))
            m *= self.separation / np.linalg.norm(m, axis=1, keepdims=True)
        if len({tuple(r) for r in m.round(12)}) != self.classes:
            raise ValueError("class means must be distinct")
        return m


def gen_gaussian_mix(spec: GaussianMixSpec) -> LabeledDataset:
    """Isotropic Gaussian clusters, ``samples_per_class`` rows per class, class-major order."""
    means = spec.class_means()
    rng = np.random.default_rng(spec.seed if spec.noise_seed is None else spec.noise_seed)
    n = spec.samples_per_class
    noise = rng.normal(0.0, np.sqrt(spec.cov_scale), (spec.classes, n, spec.dim))
    features = (means[:, None, :] + noise).reshape(spec.classes * n, spec.dim)
    labels = np.repeat(np.arange(spec.classes), n)
    return LabeledDataset(features, labels, spec.classes)


def load_cifar10_binary(
    paths: str | Path | Sequence[str | Path],
    mean: Sequence[float] = CIFAR10_MEAN,
    std: Sequence[float] = CIFAR10_STD,
) -> LabeledDataset:
    """Parse CIFAR-10 binary batches into flat channel-planar [N, 3072] features."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    labels_all, pix_all = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            offset = len(raw) - len(raw) % CIFAR_RECORD
            raise DataError(f"{path}: truncated record at byte offset {offset} (file length {len(raw)})")
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(recs[:, 0] > 9)
        if bad.size:
            raise DataError(f"{path}: label byte {recs[bad[0], 0]} > 9 at byte offset {int(bad[0]) * CIFAR_RECORD}")
        labels_all.append(recs[:, 0].astype(np.int64))
        pix_all.append(recs[:, 1:])
    pix = np.concatenate(pix_all).astype(np.float64) / 255.0
    pix = pix.reshape(-1, 3, 1024)
    pix = (pix - np.asarray(mean)[None, :, None]) / np.asarray(std)[None, :, None]
    return LabeledDataset(pix.reshape(-1, 3072), np.concatenate(labels_all), 10)


def write_cifar10_binary(path: str | Path, labels: Sequence[int], pixels: np.ndarray) -> None:
    """Inverse of the loader's raw layout; ``pixels`` is uint8 [N, 3, 32, 32]."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), 3072)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(recs.tobytes())


def save_dataset(ds: LabeledDataset, stem: str | Path, meta: dict | None = None) -> Path:
    info = {"num_classes": ds.num_classes, "counts": ds.counts(), **(meta or {})}
    return write_container(stem, {"features": ds.features, "labels": ds.labels}, info)


def load_dataset(stem: str | Path) -> LabeledDataset:
    arrays, meta = read_container(stem)
    return LabeledDataset(arrays["features"], arrays["labels"], int(meta["num_classes"]))
