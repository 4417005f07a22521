"""Round-based federated training: client sampling, local updates, aggregation.

Seed discipline: every random choice derives from ``FedConfig.seed`` through
``derive_seed`` with a purpose label and the (round, client) pair, so two
codecs run from the same config see the same client selections and batches.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .compressors import (
    CodecId, Payload, compress_update, decompress, encode_dense, encode_mask, payload_bytes,
)
from .data import Dataset, minibatches, steps_per_epoch
from .masking import PmSchedule, deterministic_mask, psm_forward, ste_step, stochastic_mask
from .models import Model
from .noise import NoiseSpec, default_noise, generate_noise
from .partition import Partition
from .rng import RngState, derive_seed, rng_choice


@dataclass
class FedConfig:
    n_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 100
    local_epochs: int = 10
    local_steps: int | None = None  # overrides local_epochs when set
    batch_size: int = 64
    lr: float | Callable[[int], float] = 0.1
    codec: CodecId = CodecId.mrn_binary
    noise: NoiseSpec | None = None  # None: the mode's default uniform range
    noise_schedule: Callable[[int], NoiseSpec] | None = None  # per-round override
    seed: int = 0
    topk_ratio: float = 0.03
    stochastic: bool = True
    progressive: bool = True
    workers: int = 1
    record_time: bool = False
    trace: bool = False

    def __post_init__(self):
        self.codec = CodecId.parse(self.codec)
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ValueError("need 1 <= clients_per_round <= n_clients")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_steps is None and self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.local_steps is not None and self.local_steps < 1:
            raise ValueError("local_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not callable(self.lr) and self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.topk_ratio <= 1:
            raise ValueError("topk_ratio must be in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.noise is None and self.codec.is_mrn:
            self.noise = default_noise(self.codec.mask_mode)

    def steps_for(self, n_samples: int) -> int:
        if self.local_steps is not None:
            return self.local_steps
        return self.local_epochs * steps_per_epoch(n_samples, self.batch_size)

    def lr_at(self, step: int) -> float:
        return self.lr(step) if callable(self.lr) else self.lr

    def noise_for(self, round_index: int) -> NoiseSpec | None:
        if self.noise_schedule is not None:
            return self.noise_schedule(round_index)
        return self.noise


@dataclass
class StepTrace:
    update: np.ndarray       # u before the step
    forward: np.ndarray      # u_hat used in the forward pass
    grad_norm: float
    lr: float


@dataclass
class ClientReport:
    client_id: int
    n_samples: int
    payload: Payload
    update: np.ndarray  # client-side view: exact dense update, or the masked noise it sends
    losses: np.ndarray
    noise: np.ndarray | None = None
    trace: list[StepTrace] = field(default_factory=list)

    @property
    def uplink_bytes(self) -> int:
        return payload_bytes(self.payload)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    codec: str
    train_loss: float
    eval_accuracy: float
    uplink_bytes: int
    elapsed_ms: int


def sample_clients(n_clients: int, k: int, round_index: int, seed: int) -> np.ndarray:
    """Uniform draw of k clients without replacement, sorted ascending."""
    return rng_choice(RngState(derive_seed(seed, "sample", round_index)), n_clients, k)


def _client_state(seed: int, purpose: str, round_index: int, client_id: int) -> RngState:
    return RngState(derive_seed(seed, purpose, round_index, client_id))


def noise_seed(seed: int, round_index: int, client_id: int) -> int:
    return derive_seed(seed, "noise", round_index, client_id)


def local_update_fedavg(global_params: np.ndarray, model: Model, shard: Dataset, config: FedConfig,
                        round_index: int = 1, client_id: int = 0) -> ClientReport:
    """Local SGD from the global parameters; the dense update is compressed afterwards if configured."""
    if config.codec.is_mrn:
        raise ValueError("mask codecs train through local_update_fedmrn")
    steps = config.steps_for(len(shard))
    w = global_params.copy()
    losses = np.empty(steps)
    trace = []
    batches = minibatches(len(shard), config.batch_size, steps,
                          _client_state(config.seed, "batch", round_index, client_id))
    base = (round_index - 1) * steps
    for tau, idx in enumerate(batches):
        loss, grad = model.loss_grad(w, shard.features[idx], shard.labels[idx])
        lr = config.lr_at(base + tau)
        if config.trace:
            trace.append(StepTrace(w - global_params, w - global_params,
                                   float(np.linalg.norm(grad)), lr))
        w = w - lr * grad
        losses[tau] = loss
    update = w - global_params
    if config.codec is CodecId.none:
        payload = encode_dense(update)
    else:
        payload = compress_update(update, config.codec,
                                  derive_seed(config.seed, "codec", round_index, client_id),
                                  config.topk_ratio)
    return ClientReport(client_id, len(shard), payload, update, losses, trace=trace)


def local_update_fedmrn(global_params: np.ndarray, model: Model, shard: Dataset, config: FedConfig,
                        round_index: int = 1, client_id: int = 0) -> ClientReport:
    """Learn a mask over seeded noise: progressive stochastic masking forward, straight-through backward."""
    if not config.codec.is_mrn:
        raise ValueError(f"codec {config.codec.name} is not a mask codec")
    mode = config.codec.mask_mode
    spec = config.noise_for(round_index)
    seed = noise_seed(config.seed, round_index, client_id)
    noise = generate_noise(spec, seed, global_params.size)
    steps = config.steps_for(len(shard))
    mask_state = _client_state(config.seed, "mask", round_index, client_id)
    batches = minibatches(len(shard), config.batch_size, steps,
                          _client_state(config.seed, "batch", round_index, client_id))
    u = np.zeros_like(global_params)
    losses = np.empty(steps)
    trace = []
    base = (round_index - 1) * steps
    for tau, idx in enumerate(batches, start=1):
        u_hat, _, _ = psm_forward(u, noise, mode, PmSchedule(steps, tau), mask_state.derive(tau),
                                  config.stochastic, config.progressive)
        loss, grad = model.loss_grad(global_params + u_hat, shard.features[idx], shard.labels[idx])
        lr = config.lr_at(base + tau - 1)
        if config.trace:
            trace.append(StepTrace(u, u_hat, float(np.linalg.norm(grad)), lr))
        u = ste_step(u, grad, lr)
        losses[tau - 1] = loss
    if config.stochastic:
        mask = stochastic_mask(u, noise, mode, mask_state.derive("final"))
    else:
        mask = deterministic_mask(u, noise, mode)
    report = ClientReport(client_id, len(shard), encode_mask(mask, seed), mask.apply(noise), losses,
                          noise=noise, trace=trace)
    if config.trace:
        # final state: u after S steps and the masked noise actually sent
        report.trace.append(StepTrace(u, report.update, float("nan"), float("nan")))
    return report


def local_update(global_params, model, shard, config, round_index=1, client_id=0) -> ClientReport:
    if config.codec.is_mrn:
        return local_update_fedmrn(global_params, model, shard, config, round_index, client_id)
    return local_update_fedavg(global_params, model, shard, config, round_index, client_id)


def decode_report(report: ClientReport, noise_spec: NoiseSpec | None) -> np.ndarray:
    """Server-side view of a client's update."""
    if report.payload.codec is CodecId.none:
        # the fp32 payload sets the byte count; the simulation keeps full precision
        return report.update
    return decompress(report.payload, noise_spec)


def aggregate(global_params: np.ndarray, reports: Sequence[ClientReport], weights: Sequence[float],
              noise_spec: NoiseSpec | None = None) -> np.ndarray:
    """``global + sum_k p'_k * update_k``, summed in ascending client id."""
    if len(reports) != len(weights) or not reports:
        raise ValueError("need one weight per report and at least one report")
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must be non-negative and sum to 1, got {weights.sum()!r}")
    dims = {r.payload.dim for r in reports}
    if dims != {global_params.size}:
        raise ValueError(f"report dimensions {sorted(dims)} do not match model size {global_params.size}")
    order = sorted(range(len(reports)), key=lambda i: reports[i].client_id)
    total = np.zeros_like(global_params)
    for i in order:
        total += weights[i] * decode_report(reports[i], noise_spec)
    return global_params + total


@dataclass
class TrainingResult:
    metrics: list[RoundMetrics]
    params: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)
    reports: list[list[ClientReport]] = field(default_factory=list)


def run_training(config: FedConfig, model: Model, dataset: Dataset, partition: Partition,
                 eval_set: Dataset | None = None, init_params: np.ndarray | None = None,
                 keep_history: bool = False,
                 on_round: Callable[[int, np.ndarray, list[ClientReport]], None] | None = None,
                 on_metrics: Callable[[RoundMetrics], None] | None = None,
                 ) -> TrainingResult:
    """Run ``config.rounds`` rounds and return per-round metrics and the final parameters.

    ``train_loss`` is the global objective sum_k p_k F_k at the new parameters,
    i.e. the mean loss over every sample held by some client.
    """
    if partition.n_clients != config.n_clients:
        raise ValueError(f"partition has {partition.n_clients} clients, config says {config.n_clients}")
    w = model.init_params(derive_seed(config.seed, "init")) if init_params is None else init_params.copy()
    if w.shape != (model.n_params,):
        raise ValueError("initial parameters do not match the model")
    shards = [dataset.subset(a) for a in partition.assignments]
    held = dataset.subset(partition.covered())
    p = partition.weights
    sampling_seed = derive_seed(config.seed, "sampling")
    result = TrainingResult([], w)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for r in range(1, config.rounds + 1):
            start = time.perf_counter()
            chosen = sample_clients(config.n_clients, config.clients_per_round, r, sampling_seed)

            def work(k, w=w, r=r):
                return local_update(w, model, shards[k], config, r, int(k))

            reports = list(pool.map(work, chosen)) if pool else [work(k) for k in chosen]
            sel = p[chosen]
            w = aggregate(w, reports, sel / sel.sum(), config.noise_for(r))
            if not np.all(np.isfinite(w)):
                raise FloatingPointError(f"non-finite parameters after round {r}")
            elapsed = int(round((time.perf_counter() - start) * 1000)) if config.record_time else 0
            metrics = RoundMetrics(
                r, config.codec.name, model.loss(w, held.features, held.labels),
                model.accuracy(w, eval_set) if eval_set is not None else float("nan"),
                sum(rep.uplink_bytes for rep in reports), elapsed,
            )
            result.metrics.append(metrics)
            if on_metrics is not None:
                on_metrics(metrics)
            if keep_history:
                result.history.append(w.copy())
            if config.trace:
                result.reports.append(reports)
            if on_round is not None:
                on_round(r, w, reports)
    finally:
        if pool:
            pool.shutdown()
    result.params = w
    return result
