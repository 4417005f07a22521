from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngState, rng_gaussian, rng_two_point, rng_uniform

DISTRIBUTIONS = ("uniform", "gaussian", "two_point")

# stream tag shared by clients and server when regenerating G(s)
NOISE_STREAM = 0x4E4F495345  # "NOISE"

DEFAULT_BINARY_MAGNITUDE = 1e-2
DEFAULT_SIGNED_MAGNITUDE = 5e-3


@dataclass(frozen=True)
class NoiseSpec:
    """Distribution family and magnitude of the seeded noise.

    ``uniform`` draws from (-m, m), ``gaussian`` from N(0, m) with m the
    standard deviation, ``two_point`` from {-m, +m}.
    """

    distribution: str = "uniform"
    magnitude: float = DEFAULT_BINARY_MAGNITUDE

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown noise distribution {self.distribution!r}")
        if not self.magnitude > 0:
            raise ValueError(f"noise magnitude must be positive, got {self.magnitude}")

    def scaled(self, magnitude: float) -> NoiseSpec:
        return NoiseSpec(self.distribution, magnitude)


def default_noise(mode: str) -> NoiseSpec:
    magnitude = DEFAULT_SIGNED_MAGNITUDE if mode == "signed" else DEFAULT_BINARY_MAGNITUDE
    return NoiseSpec("uniform", magnitude)


def generate_noise(spec: NoiseSpec, seed: int, d: int) -> np.ndarray:
    """Noise vector for ``seed``; never contains an exact zero."""
    state = RngState(seed, NOISE_STREAM)
    if spec.distribution == "uniform":
        return rng_uniform(state, d, -spec.magnitude, spec.magnitude)
    if spec.distribution == "gaussian":
        return rng_gaussian(state, d, spec.magnitude)
    return rng_two_point(state, d, spec.magnitude)
