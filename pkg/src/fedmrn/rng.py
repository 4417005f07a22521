"""Counter-based random streams.

Every random quantity in the simulator comes from Philox4x64-10 keyed by
``(seed, stream_id)``. The raw 64-bit stream is a pure function of the key,
so a client and the server that agree on a seed regenerate the same noise
bit for bit. Only numpy's ``random_raw`` is used; the float transforms
(uniform, Gaussian, two-point) are implemented here so they cannot drift
with numpy's ``Generator`` stream policy.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / (1 << 53)


def derive_seed(seed: int, *labels: int | str) -> int:
    """Domain-separated 64-bit child seed of ``seed`` (BLAKE2b over the labels)."""
    h = hashlib.blake2b(digest_size=8, person=b"fedmrn-seed")
    h.update(struct.pack("<Q", seed & MASK64))
    for label in labels:
        if isinstance(label, str):
            raw = label.encode()
            h.update(b"s" + struct.pack("<I", len(raw)) + raw)
        else:
            h.update(b"i" + struct.pack("<Q", int(label) & MASK64))
    return struct.unpack("<Q", h.digest())[0]


@dataclass(frozen=True)
class RngState:
    """Key of one random stream. Calls that take a state always restart it at position 0."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= MASK64 and 0 <= self.stream_id <= MASK64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")

    def derive(self, *labels: int | str) -> RngState:
        """Independent child stream, e.g. ``state.derive("gate", step)``."""
        return RngState(self.seed, derive_seed(self.stream_id, *labels))

    def raw(self, count: int, offset: int = 0) -> np.ndarray:
        """``count`` raw uint64 words starting ``offset`` words into the stream."""
        if count < 0 or offset < 0:
            raise ValueError("count and offset must be non-negative")
        blocks, skip = divmod(offset, 4)
        # numpy increments the counter before each block, so Philox(counter=c)
        # starts at block c of the default stream (Philox counter value c + 1)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        bg = np.random.Philox(key=key, counter=blocks)
        out = bg.random_raw(count + skip)
        return np.asarray(out, dtype=np.uint64)[skip:]


def _open_unit(words: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted half an ulp: strictly inside (0, 1), never 0.5 exactly
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def rng_unit(state: RngState, count: int) -> np.ndarray:
    """Uniform draws in [0, 1) with 53-bit resolution, one word per draw.

    Used for Bernoulli decisions (``draw < p``), so ``p = 0`` never fires and
    ``p = 1`` always does.
    """
    return (state.raw(count) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def _fill_nonzero(state: RngState, count: int, transform) -> np.ndarray:
    # transform maps raw words to samples; exact zeros are redrawn from a
    # continuation stream so the consumption schedule stays fixed
    return _redraw_zeros(state, transform(state.raw(count)), transform)


def _redraw_zeros(state: RngState, out: np.ndarray, transform, max_rounds: int = 64) -> np.ndarray:
    for retry in range(1, max_rounds + 1):
        bad = np.flatnonzero(out == 0.0)
        if bad.size == 0:
            return out
        out[bad] = transform(state.derive("redraw", retry).raw(bad.size))
    raise ValueError("distribution keeps producing exact zeros; its range is too narrow")


def rng_uniform(state: RngState, count: int, lo: float, hi: float) -> np.ndarray:
    """``count`` samples from the open interval (lo, hi); exact zero is never returned."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    width = hi - lo

    def transform(words):
        x = lo + width * _open_unit(words)
        return np.clip(x, np.nextafter(lo, hi), np.nextafter(hi, lo))

    return _fill_nonzero(state, count, transform)


def rng_gaussian(state: RngState, count: int, sigma: float) -> np.ndarray:
    """Zero-mean Gaussian draws with standard deviation ``sigma`` (Box-Muller)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pairs = (count + 1) // 2

    def transform(words):
        n = words.size
        words = np.concatenate([words, state.derive("pad").raw(n % 2)])
        u1 = _open_unit(words[0::2])
        u2 = _open_unit(words[1::2])
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * u1.size)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return sigma * z[:n]

    if count == 0:
        return np.zeros(0)
    return _redraw_zeros(state, transform(state.raw(2 * pairs))[:count], transform)


def rng_two_point(state: RngState, count: int, magnitude: float) -> np.ndarray:
    """Draws of +magnitude or -magnitude with probability 1/2 each (top bit of each word)."""
    if not magnitude > 0:
        raise ValueError(f"magnitude must be positive, got {magnitude}")
    top = (state.raw(count) >> np.uint64(63)).astype(np.float64)
    return magnitude * (2.0 * top - 1.0)


def rng_permutation(state: RngState, n: int) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` (stable argsort of raw words)."""
    return np.argsort(state.raw(n), kind="stable")


def rng_choice(state: RngState, n: int, k: int) -> np.ndarray:
    """``k`` distinct items of ``range(n)`` chosen uniformly, in ascending order."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot choose {k} of {n}")
    return np.sort(rng_permutation(state, n)[:k])


def numpy_generator(state: RngState) -> np.random.Generator:
    """numpy Generator on the same Philox key, for variates without a local transform (Dirichlet)."""
    return np.random.Generator(
        np.random.Philox(key=np.array([state.seed, state.stream_id], dtype=np.uint64))
    )
