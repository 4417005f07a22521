"""Masking of model updates onto seeded noise.

A binary mask keeps or drops each noise entry; a signed mask keeps or flips
it. Stochastic masking draws each bit with the probability that makes the
masked noise an unbiased estimate of the update, as long as the update lies
inside the interval the noise can reach. Progressive masking gates which
coordinates are masked at a given local step, with the gate probability
rising linearly to 1 at the last step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngState, rng_unit

MODES = ("binary", "signed")


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mask mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class MaskVector:
    bits: np.ndarray  # bool, length d
    mode: str

    def __post_init__(self):
        check_mode(self.mode)

    def __len__(self) -> int:
        return self.bits.size

    def values(self) -> np.ndarray:
        """The mask as numbers: {0, 1} for binary, {-1, +1} for signed."""
        m = self.bits.astype(np.float64)
        return m if self.mode == "binary" else 2.0 * m - 1.0

    def apply(self, noise: np.ndarray) -> np.ndarray:
        """Masked noise ``noise * mask``."""
        _same_length(noise, self.bits)
        return noise * self.values()

    def __eq__(self, other):
        if not isinstance(other, MaskVector):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class PmSchedule:
    total_steps: int
    current_step: int

    def __post_init__(self):
        if self.total_steps < 1 or not 1 <= self.current_step <= self.total_steps:
            raise ValueError(f"need 1 <= step <= total, got {self.current_step}/{self.total_steps}")

    @property
    def probability(self) -> float:
        return self.current_step / self.total_steps


def _same_length(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"length mismatch: {np.shape(a)} vs {np.shape(b)}")


def mask_probability(u, n, mode: str):
    """Probability that a mask bit is 1: clip(u/n) (binary) or clip((u+n)/2n) (signed)."""
    check_mode(mode)
    u = np.asarray(u, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if np.any(n == 0):
        raise ValueError("noise entries must be nonzero")
    ratio = u / n if mode == "binary" else (u + n) / (2.0 * n)
    p = np.clip(ratio, 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


def stochastic_mask(u: np.ndarray, noise: np.ndarray, mode: str, rng: RngState) -> MaskVector:
    """Bernoulli mask with ``mask_probability``; one uniform draw per coordinate in index order."""
    _same_length(u, noise)
    p = mask_probability(u, noise, mode)
    return MaskVector(rng_unit(rng, np.size(u)) < p, mode)


def deterministic_mask(u: np.ndarray, noise: np.ndarray, mode: str) -> MaskVector:
    """Sign-agreement mask. Ties at u == 0 give 0 (binary) and +1 (signed)."""
    check_mode(mode)
    _same_length(u, noise)
    u = np.asarray(u, dtype=np.float64)
    agree = u * noise
    bits = agree > 0 if mode == "binary" else agree >= 0
    return MaskVector(bits, mode)


def clip_to_noise(u: np.ndarray, noise: np.ndarray, mode: str) -> np.ndarray:
    """Clamp each update into the range its masked noise can represent."""
    check_mode(mode)
    _same_length(u, noise)
    if mode == "binary":
        return np.clip(u, np.minimum(0.0, noise), np.maximum(0.0, noise))
    a = np.abs(noise)
    return np.clip(u, -a, a)


def psm_forward(u: np.ndarray, noise: np.ndarray, mode: str, schedule: PmSchedule,
                rng: RngState, stochastic: bool = True, progressive: bool = True):
    """Forward-pass update for one local step: returns ``(u_hat, mask, gate)``.

    Gated coordinates (probability step/S) carry masked noise, the rest carry
    the clipped update. The mask consumes ``rng`` itself and the gate consumes
    ``rng.derive("gate")``, so at the final step the output equals
    ``stochastic_mask(u, noise, mode, rng).apply(noise)`` exactly.
    ``stochastic=False`` swaps in deterministic masking and
    ``progressive=False`` gates every coordinate (ablations).
    """
    _same_length(u, noise)
    if stochastic:
        mask = stochastic_mask(u, noise, mode, rng)
    else:
        mask = deterministic_mask(u, noise, mode)
    masked = mask.apply(noise)
    p = schedule.probability if progressive else 1.0
    gate = rng_unit(rng.derive("gate"), np.size(u)) < p
    u_hat = np.where(gate, masked, clip_to_noise(u, noise, mode))
    return u_hat, mask, gate


def ste_step(u: np.ndarray, grad_at_masked: np.ndarray, lr: float) -> np.ndarray:
    """SGD step on the update, passing the gradient straight through the masking."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _same_length(u, grad_at_masked)
    return u - lr * grad_at_masked
