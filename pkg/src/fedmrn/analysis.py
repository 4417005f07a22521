"""Executable probes for the theory: masking error, progressive-masking factor,
convergence rate and client drift.

Probes consume the simulator as a black box. The convex probes run on a
strongly convex quadratic testbed whose minimiser is known in closed form,
so the optimality gap needs no estimation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .federation import FedConfig, run_training
from .masking import check_mode, mask_probability
from .models import Quadratic
from .noise import NoiseSpec, generate_noise
from .partition import Partition
from .rng import RngState, derive_seed, rng_gaussian, rng_uniform, rng_unit


# masking error -------------------------------------------------------------

def _mask_errors(x: np.ndarray, noise: np.ndarray, mode: str, trials: int, state: RngState) -> np.ndarray:
    """Norms of ``S(x, n) - x`` for ``trials`` independent maskings (one row of draws per trial)."""
    p = mask_probability(x, noise, mode)
    bits = rng_unit(state, trials * x.size).reshape(trials, x.size) < p
    masked = noise * (bits if mode == "binary" else 2.0 * bits - 1.0)
    return np.linalg.norm(masked - x, axis=1)


def estimate_q(update_samples, noise, mode: str, trials: int = 1000, seed: int = 0) -> float:
    """Empirical masking-error ratio: max over samples of mean ||S(x, n) - x|| / ||x||.

    ``noise`` is either one fixed noise vector shared by all samples, a list
    with one vector per sample, or a ``NoiseSpec`` from which a vector is
    drawn per sample. Zero samples are skipped (the ratio is undefined).
    """
    check_mode(mode)
    samples = [np.asarray(x, dtype=np.float64) for x in update_samples]
    if trials < 1 or not samples:
        raise ValueError("need at least one sample and one trial")
    root = RngState(derive_seed(seed, "estimate-q"))
    q = 0.0
    for i, x in enumerate(samples):
        if isinstance(noise, NoiseSpec):
            n = generate_noise(noise, derive_seed(seed, "q-noise", i), x.size)
        elif isinstance(noise, (list, tuple)):
            n = np.asarray(noise[i], dtype=np.float64)
        else:
            n = np.asarray(noise, dtype=np.float64)
        norm = np.linalg.norm(x)
        if norm == 0:
            continue
        q = max(q, float(_mask_errors(x, n, mode, trials, root.derive(i)).mean() / norm))
    return q


def pm_factor(S: int) -> float:
    """Reduction of the masking-error ratio by progressive masking: sqrt(sum tau^2 / S^3)."""
    if S < 1:
        raise ValueError("S must be >= 1")
    squares = S * (S + 1) * (2 * S + 1) // 6
    return math.sqrt(squares / S**3)


def element_gate_factor(S: int) -> float:
    """The same reduction when each coordinate is gated independently: sqrt((S + 1) / 2S)."""
    if S < 1:
        raise ValueError("S must be >= 1")
    return math.sqrt((S + 1) / (2 * S))


@dataclass(frozen=True)
class PmCheck:
    empirical: float
    analytic: float
    q_base: float

    @property
    def relative_error(self) -> float:
        return abs(self.empirical - self.analytic) / self.analytic


def verify_pm_factor(d: int, S: int, noise_spec: NoiseSpec, trials: int = 10_000, mode: str = "binary",
                     gate: str = "vector", seed: int = 0) -> PmCheck:
    """Simulate gated masking error at every step and compare with the analytic factor.

    At step tau a gate with probability tau/S decides which coordinates carry
    masked noise; ungated ones carry the (in-range) update exactly. The
    per-step first-moment ratio q_tau = E||err|| / ||x|| is combined as
    sqrt(mean_tau q_tau^2) and divided by the ungated ratio.

    ``gate="vector"`` gates the whole vector at once, which gives
    ``pm_factor(S)`` exactly. ``gate="element"`` gates coordinates
    independently; for large d the error norm then concentrates and the
    factor becomes ``element_gate_factor(S)``.
    """
    check_mode(mode)
    if gate not in ("vector", "element"):
        raise ValueError(f"gate must be 'vector' or 'element', got {gate!r}")
    root = RngState(derive_seed(seed, "pm-factor"))
    noise = generate_noise(noise_spec, derive_seed(seed, "pm-noise"), d)
    lo = 0.0 if mode == "binary" else -1.0
    x = noise * rng_uniform(root.derive("ratio"), d, lo, 1.0)
    norm = np.linalg.norm(x)
    p = mask_probability(x, noise, mode)

    def errors(state):
        bits = rng_unit(state, trials * d).reshape(trials, d) < p
        masked = noise * (bits if mode == "binary" else 2.0 * bits - 1.0)
        return masked - x

    q_base = float(np.linalg.norm(errors(root.derive("base")), axis=1).mean() / norm)
    q_steps = np.empty(S)
    for tau in range(1, S + 1):
        err = errors(root.derive("step", tau))
        if gate == "vector":
            on = rng_unit(root.derive("gate", tau), trials)[:, None] < tau / S
        else:
            on = rng_unit(root.derive("gate", tau), trials * d).reshape(trials, d) < tau / S
        q_steps[tau - 1] = np.linalg.norm(np.where(on, err, 0.0), axis=1).mean() / norm
    empirical = math.sqrt(float(np.mean(q_steps**2))) / q_base
    analytic = pm_factor(S) if gate == "vector" else element_gate_factor(S)
    return PmCheck(empirical, analytic, q_base)


# convergence ---------------------------------------------------------------

def convergence_slope(curve, burn_in: int = 0, f_star: float = 0.0, steps=None) -> float:
    """Least-squares slope of log(F_t - F*) against log t, using points with t > burn_in.

    ``steps`` defaults to 1, 2, ...; every gap used must be positive.
    """
    curve = np.asarray(curve, dtype=np.float64)
    t = np.arange(1, curve.size + 1, dtype=np.float64) if steps is None else np.asarray(steps, float)
    keep = t > burn_in
    gap = curve[keep] - f_star
    if gap.size < 2:
        raise ValueError("need at least two points after burn-in")
    if np.any(gap <= 0):
        raise ValueError("optimality gap must be positive to take logs")
    slope, _ = np.polyfit(np.log(t[keep]), np.log(gap), 1)
    return float(slope)


@dataclass
class QuadraticTestbed:
    model: Quadratic
    data: Dataset
    partition: Partition
    w_star: np.ndarray
    f_star: float

    def gap(self, w: np.ndarray) -> float:
        return self.model.loss(w, self.data.features, None) - self.f_star

    def max_sample_grad(self, w: np.ndarray) -> float:
        """Largest single-sample gradient norm at ``w``; bounds every mini-batch gradient there."""
        return float(np.linalg.norm(self.model.curvature * (w - self.data.features), axis=1).max())


def make_quadratic_testbed(n_clients: int = 10, d: int = 50, samples_per_client: int = 20,
                           mu: float = 1.0, L: float = 4.0, heterogeneity: float = 1.0,
                           spread: float = 1.0, seed: int = 0) -> QuadraticTestbed:
    """Balanced shards of targets z = c_k + e: client centres c_k ~ N(0, heterogeneity^2),
    within-client noise e ~ N(0, spread^2); curvature spaced evenly over [mu, L]."""
    root = RngState(derive_seed(seed, "quadratic"))
    centres = rng_gaussian(root.derive("centres"), n_clients * d, heterogeneity).reshape(n_clients, d)
    n = n_clients * samples_per_client
    noise = rng_gaussian(root.derive("spread"), n * d, spread).reshape(n, d)
    targets = np.repeat(centres, samples_per_client, axis=0) + noise
    data = Dataset(targets, np.zeros(n, dtype=np.int64), 1)
    shards = tuple(np.arange(k * samples_per_client, (k + 1) * samples_per_client) for k in range(n_clients))
    model = Quadratic(np.linspace(mu, L, d))
    w_star, f_star = model.minimizer(targets)
    return QuadraticTestbed(model, data, Partition(shards), w_star, f_star)


def strongly_convex_lr(mu: float, L: float, S: int):
    """Step size 2 / (mu (gamma + t)) with gamma = max(8 L/mu, S) - 1."""
    gamma = max(8 * L / mu, S) - 1

    def lr(t: int) -> float:
        return 2.0 / (mu * (gamma + t))

    return lr


@dataclass
class ConvexRun:
    gaps: np.ndarray            # F(w_r) - F* after each round
    G: float                    # running max of observed stochastic gradient norms
    G_noise: float              # the fixed bound that sets the noise magnitude
    ratios: np.ndarray          # per round, max |u_i / n_i| over the selected clients
    drift: np.ndarray           # per (round, step, client) ||w_bar - x_k||^2
    drift_bound: np.ndarray     # matching 4 (1 + q^2) eta^2 (S - 1)^2 G^2, filled after q_hat
    final_updates: list = field(default_factory=list)
    final_noise: list = field(default_factory=list)
    q_hat: float = float("nan")

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max()) if self.ratios.size else 0.0


def run_convex(testbed: QuadraticTestbed, codec: str = "mrn_signed", rounds: int = 500,
               clients_per_round: int = 5, local_steps: int = 5, batch_size: int = 4,
               seed: int = 0, lr=None, noise_scale: float | None = None, G: float | None = None,
               q_trials: int = 50, keep_updates: int = 200) -> ConvexRun:
    """FedMRN (or a dense baseline) on the quadratic testbed with the convex-theory schedule.

    Noise per round is two-point with magnitude ``noise_scale * eta_{t0} * S * G``
    where t0 is the round's first step. G is fixed for the run and defaults
    to the largest single-sample gradient norm at the start point. It is not
    updated from observed gradients: those are taken at noisy points whose
    spread grows with G, so a running max feeds back into the noise and
    diverges. The observed running max is still recorded for the drift bound.
    ``noise_scale`` defaults to 2 for signed and 4 for binary masks, since
    binary masks need twice the noise for the same range.
    """
    model = testbed.model
    S = local_steps
    lr = strongly_convex_lr(model.mu, model.smoothness, S) if lr is None else lr
    w0 = model.init_params(seed)
    G_noise = testbed.max_sample_grad(w0) if G is None else G
    state = {"G": 0.0}
    is_mrn = codec.startswith("mrn")
    if noise_scale is None:
        noise_scale = 2.0 if codec == "mrn_signed" else 4.0
    lr_at = lr if callable(lr) else (lambda t: lr)

    def schedule(r: int) -> NoiseSpec:
        mag = noise_scale * lr_at((r - 1) * S) * S * G_noise
        return NoiseSpec("two_point", max(mag, 1e-300))

    config = FedConfig(n_clients=testbed.partition.n_clients, clients_per_round=clients_per_round,
                       rounds=rounds, local_steps=S, batch_size=batch_size, lr=lr, codec=codec,
                       noise_schedule=schedule if is_mrn else None, seed=seed, trace=True)
    gaps, drift, bound_parts = [], [], []
    ratios = []
    run = ConvexRun(np.empty(0), 0.0, G_noise, np.empty(0), np.empty(0), np.empty(0))

    def on_round(r, w, reports):
        gaps.append(testbed.gap(w))
        for rep in reports:
            for step in rep.trace[:S]:
                state["G"] = max(state["G"], step.grad_norm)
        # drift: clients' evaluation points around their mean at each local step
        for tau in range(S):
            xs = np.stack([rep.trace[tau].forward for rep in reports])
            dev = np.sum((xs - xs.mean(axis=0)) ** 2, axis=1)
            drift.extend(dev)
            bound_parts.extend([reports[0].trace[tau].lr] * len(reports))
        if is_mrn:
            ratios.append(max(float(np.max(np.abs(rep.trace[S].update / rep.noise))) for rep in reports))
            for rep in reports:
                u = rep.trace[S].update
                if len(run.final_updates) < keep_updates and np.any(u):
                    run.final_updates.append(u)
                    run.final_noise.append(rep.noise)
        # the trace is consumed; drop it so long runs stay small
        for rep in reports:
            rep.trace.clear()

    run_training(config, model, testbed.data, testbed.partition, init_params=w0, on_round=on_round)
    run.gaps = np.array(gaps)
    run.G = state["G"]
    run.ratios = np.array(ratios)
    run.drift = np.array(drift)
    etas = np.array(bound_parts)
    if is_mrn and run.final_updates:
        mode = "signed" if codec == "mrn_signed" else "binary"
        run.q_hat = estimate_q(run.final_updates, run.final_noise, mode, q_trials, seed)
    q = 0.0 if math.isnan(run.q_hat) else run.q_hat
    run.drift_bound = 4 * (1 + q**2) * etas**2 * (S - 1) ** 2 * run.G**2
    return run


def gradient_drift(run: ConvexRun) -> tuple[np.ndarray, np.ndarray]:
    """Measured drifts and their bounds, aligned element by element."""
    return run.drift, run.drift_bound


# report --------------------------------------------------------------------

@dataclass
class AnalysisReport:
    q_hat: float = float("nan")
    pm_factor_hat: float = float("nan")
    slope_hat: float = float("nan")
    drift: list[float] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isnan(self.q_hat) and self.q_hat < 0:
            raise ValueError("q_hat must be non-negative")
        if not math.isnan(self.pm_factor_hat) and not 0 < self.pm_factor_hat <= 1:
            raise ValueError("pm_factor_hat must lie in (0, 1]")

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, np.generic):
                return clean(v.item())
            return v

        return json.dumps(clean(asdict(self)), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> AnalysisReport:
        raw = json.loads(line)
        nan = float("nan")
        return cls(
            q_hat=nan if raw["q_hat"] is None else raw["q_hat"],
            pm_factor_hat=nan if raw["pm_factor_hat"] is None else raw["pm_factor_hat"],
            slope_hat=nan if raw["slope_hat"] is None else raw["slope_hat"],
            drift=[nan if x is None else x for x in raw["drift"]],
            extras=raw.get("extras", {}),
        )
