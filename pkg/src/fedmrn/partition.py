from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .rng import RngState, derive_seed, numpy_generator, rng_choice, rng_permutation


@dataclass(frozen=True)
class Partition:
    """Disjoint per-client index lists and their data-proportional weights p_k."""

    assignments: tuple[np.ndarray, ...]

    def __post_init__(self):
        sizes = [a.size for a in self.assignments]
        if not sizes or min(sizes) < 1:
            raise ValueError("every client needs at least one sample")
        joined = np.concatenate(self.assignments)
        if np.unique(joined).size != joined.size:
            raise ValueError("client shards overlap")

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([a.size for a in self.assignments], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        sizes = self.sizes.astype(np.float64)
        return sizes / sizes.sum()

    def covered(self) -> np.ndarray:
        return np.sort(np.concatenate(self.assignments))


def _check_counts(n_samples: int, n_clients: int):
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_clients > n_samples:
        raise ValueError(f"cannot give {n_clients} clients a sample each from {n_samples} samples")


def partition_iid(data: Dataset, n_clients: int, seed: int) -> Partition:
    """Random equal-size shards (sizes differ by at most one)."""
    _check_counts(len(data), n_clients)
    perm = rng_permutation(RngState(derive_seed(seed, "iid")), len(data))
    return Partition(tuple(np.sort(s) for s in np.array_split(perm, n_clients)))


def partition_dirichlet(data: Dataset, n_clients: int, beta: float, seed: int,
                        max_attempts: int = 10_000) -> Partition:
    """Per-label client shares drawn from Dirichlet(beta), redrawn until no client is empty."""
    if not beta > 0:
        raise ValueError(f"Dirichlet concentration must be positive, got {beta}")
    _check_counts(len(data), n_clients)
    root = RngState(derive_seed(seed, "dirichlet"))
    by_label = [np.flatnonzero(data.labels == c) for c in range(data.n_classes)]
    for attempt in range(max_attempts):
        state = root.derive("attempt", attempt)
        gen = numpy_generator(state)
        shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c, idx in enumerate(by_label):
            if idx.size == 0:
                continue
            idx = idx[rng_permutation(state.derive("label", c), idx.size)]
            shares = gen.dirichlet(np.full(n_clients, beta))
            cuts = (np.cumsum(shares) * idx.size).astype(np.int64)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].append(part)
        merged = [np.sort(np.concatenate(parts)) for parts in shards]
        if min(m.size for m in merged) > 0:
            return Partition(tuple(merged))
    raise ValueError(f"no Dirichlet({beta}) draw left every client nonempty in {max_attempts} attempts")


def partition_by_labels(data: Dataset, n_clients: int, labels_per_client: int, seed: int) -> Partition:
    """Each client holds exactly ``labels_per_client`` labels; a label's samples are split evenly among its holders.

    Client k always holds label k mod C, so every present label is used when
    n_clients >= C; the remaining labels are drawn at random.
    """
    _check_counts(len(data), n_clients)
    present = np.flatnonzero(data.label_counts() > 0)
    if not 1 <= labels_per_client <= present.size:
        raise ValueError(f"labels_per_client must be in [1, {present.size}], got {labels_per_client}")
    root = RngState(derive_seed(seed, "labels"))
    held = []
    for k in range(n_clients):
        first = present[k % present.size]
        rest = np.setdiff1d(present, [first])
        extra = rest[rng_choice(root.derive("client", k), rest.size, labels_per_client - 1)]
        held.append(np.concatenate([[first], extra]))
    shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in present:
        holders = [k for k in range(n_clients) if c in held[k]]
        if not holders:
            continue
        idx = np.flatnonzero(data.labels == c)
        if idx.size < len(holders):
            raise ValueError(f"label {c} has {idx.size} samples for {len(holders)} clients")
        idx = idx[rng_permutation(root.derive("label", int(c)), idx.size)]
        for k, part in zip(holders, np.array_split(idx, len(holders))):
            shards[k].append(part)
    return Partition(tuple(np.sort(np.concatenate(parts)) for parts in shards))


def make_partition(data: Dataset, n_clients: int, scheme: str, seed: int, beta: float = 0.3,
                   labels_per_client: int = 3) -> Partition:
    if scheme == "iid":
        return partition_iid(data, n_clients, seed)
    if scheme == "dirichlet":
        return partition_dirichlet(data, n_clients, beta, seed)
    if scheme == "labels":
        return partition_by_labels(data, n_clients, labels_per_client, seed)
    raise ValueError(f"unknown partition scheme {scheme!r}")
