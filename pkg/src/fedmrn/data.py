from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import RngState, derive_seed, rng_gaussian, rng_permutation


class CsvFormatError(ValueError):
    """Malformed dataset file; the message names the offending line."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.features.shape[0] < 1:
            raise ValueError("dataset needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 5000
    n_features: int = 20
    n_classes: int = 3
    cluster_spread: float = 1.0
    seed: int = 0
    clusters_per_class: int = 1
    center_scale: float = 1.0


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian blobs: each class owns ``clusters_per_class`` centres, samples are centre + spread * N(0, I).

    Labels cycle through the classes before shuffling, so class counts differ
    by at most one.
    """
    if min(spec.n_samples, spec.n_features, spec.n_classes, spec.clusters_per_class) < 1:
        raise ValueError("synthetic dataset sizes must be positive")
    root = RngState(derive_seed(spec.seed, "synthetic"))
    n_centres = spec.n_classes * spec.clusters_per_class
    centres = spec.center_scale * rng_gaussian(
        root.derive("centres"), n_centres * spec.n_features, 1.0
    ).reshape(n_centres, spec.n_features)

    labels = np.arange(spec.n_samples) % spec.n_classes
    cluster = (np.arange(spec.n_samples) // spec.n_classes) % spec.clusters_per_class
    order = rng_permutation(root.derive("order"), spec.n_samples)
    labels, cluster = labels[order], cluster[order]

    x = centres[labels * spec.clusters_per_class + cluster]
    if spec.cluster_spread > 0:
        jitter = rng_gaussian(root.derive("jitter"), spec.n_samples * spec.n_features, 1.0)
        x = x + spec.cluster_spread * jitter.reshape(spec.n_samples, spec.n_features)
    return Dataset(np.ascontiguousarray(x), labels.astype(np.int64), spec.n_classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    order = rng_permutation(RngState(derive_seed(seed, "split")), len(data))
    n_test = max(1, int(round(len(data) * test_fraction)))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


def load_csv(path: str | Path, header: bool = False, n_classes: int | None = None) -> Dataset:
    """Read numeric feature columns followed by an integer label column."""
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise CsvFormatError(f"{path}:{lineno}: need at least one feature and a label")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CsvFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
            if not all(math.isfinite(v) for v in feats):
                raise CsvFormatError(f"{path}:{lineno}: non-finite feature value")
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise CsvFormatError(f"{path}:{lineno}: label {row[-1]!r} is not an integer") from None
            if label < 0:
                raise CsvFormatError(f"{path}:{lineno}: negative label {label}")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    if y.max() >= k:
        raise CsvFormatError(f"{path}: label {int(y.max())} >= n_classes={k}")
    return Dataset(np.asarray(rows, dtype=np.float64), y, k)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def minibatches(n: int, batch_size: int, steps: int, state: RngState) -> Iterator[np.ndarray]:
    """``steps`` sequential mini-batches of ``range(n)``, reshuffled every epoch.

    The final batch of an epoch may be short; batches never straddle epochs.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    per_epoch = steps_per_epoch(n, batch_size)
    perm = None
    for step in range(steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            perm = rng_permutation(state.derive("epoch", epoch), n)
        yield perm[pos * batch_size:(pos + 1) * batch_size]
