"""Run configuration: a flat key-value document in YAML or JSON.

Every key is optional; omitted keys take the defaults below, which follow
the reference experimental setup (100 clients, 10 per round, 10 local
epochs, batch 64, Dirichlet 0.3). ``noise_magnitude: null`` picks the mask
mode's default range: 1e-2 for binary masks, 5e-3 for signed masks.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .compressors import CodecId
from .data import Dataset, SyntheticSpec, load_csv, make_synthetic, train_test_split
from .federation import FedConfig
from .models import Model, build_model
from .noise import DISTRIBUTIONS, NoiseSpec, default_noise
from .partition import Partition, make_partition
from .rng import derive_seed

PROBES = ("q", "pm_factor", "slope", "drift")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 0
    output: str = "runs/default"
    codecs: list[str] = field(default_factory=lambda: ["none", "mrn_binary"])
    # data
    dataset: str = "synthetic"
    csv_path: str | None = None
    csv_header: bool = False
    n_samples: int = 5000
    n_features: int = 20
    n_classes: int = 3
    cluster_spread: float = 1.0
    clusters_per_class: int = 2
    center_scale: float = 1.0
    test_fraction: float = 0.2
    # partition
    partition: str = "dirichlet"
    beta: float = 0.3
    labels_per_client: int = 3
    # model
    model: str = "mlp_one_hidden"
    hidden: int = 256
    activation: str = "tanh"
    # federation
    n_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 100
    local_epochs: int = 10
    local_steps: int | None = None
    batch_size: int = 64
    lr: float = 0.1
    topk_ratio: float = 0.03
    noise_distribution: str = "uniform"
    noise_magnitude: float | None = None
    stochastic: bool = True
    progressive: bool = True
    workers: int = 1
    record_time: bool = False
    # probes
    probes: list[str] = field(default_factory=lambda: list(PROBES))
    probe_trials: int = 10_000
    probe_rounds: int = 500

    def validate(self) -> RunConfig:
        if not self.codecs:
            raise ConfigError("codecs", "codec list is empty")
        for c in self.codecs:
            try:
                CodecId.parse(c)
            except ValueError as e:
                raise ConfigError("codecs", str(e)) from None
        if len(set(self.codecs)) != len(self.codecs):
            raise ConfigError("codecs", "codec listed twice")
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError("dataset", f"must be 'synthetic' or 'csv', got {self.dataset!r}")
        if self.dataset == "csv":
            if not self.csv_path:
                raise ConfigError("csv_path", "required when dataset is 'csv'")
            if not Path(self.csv_path).is_file():
                raise ConfigError("csv_path", f"cannot read {self.csv_path}")
        for key in ("n_samples", "n_features", "n_classes", "clusters_per_class", "n_clients",
                    "clients_per_round", "rounds", "local_epochs", "batch_size", "workers",
                    "hidden", "labels_per_client", "probe_trials", "probe_rounds"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.local_steps is not None and self.local_steps < 1:
            raise ConfigError("local_steps", "must be >= 1")
        if self.clients_per_round > self.n_clients:
            raise ConfigError("clients_per_round", f"K={self.clients_per_round} exceeds N={self.n_clients}")
        if self.dataset == "synthetic" and self.n_clients > self.n_samples:
            raise ConfigError("n_clients", "more clients than samples")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread", "must be >= 0")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction", "must be in (0, 1)")
        if self.partition not in ("iid", "dirichlet", "labels"):
            raise ConfigError("partition", f"must be iid, dirichlet or labels, got {self.partition!r}")
        if not self.beta > 0:
            raise ConfigError("beta", "must be positive")
        if self.model not in ("logistic_regression", "mlp_one_hidden"):
            raise ConfigError("model", f"unknown model {self.model!r}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError("activation", f"unknown activation {self.activation!r}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr", "must be positive")
        if not 0 < self.topk_ratio <= 1:
            raise ConfigError("topk_ratio", "must be in (0, 1]")
        if self.noise_distribution not in DISTRIBUTIONS:
            raise ConfigError("noise_distribution", f"must be one of {DISTRIBUTIONS}")
        if self.noise_magnitude is not None and not self.noise_magnitude > 0:
            raise ConfigError("noise_magnitude", "must be positive")
        for p in self.probes:
            if p not in PROBES:
                raise ConfigError("probes", f"unknown probe {p!r}; choose from {PROBES}")
        return self

    # builders ----------------------------------------------------------

    def noise_for(self, codec: str) -> NoiseSpec | None:
        cid = CodecId.parse(codec)
        if not cid.is_mrn:
            return None
        base = default_noise(cid.mask_mode)
        mag = base.magnitude if self.noise_magnitude is None else self.noise_magnitude
        return NoiseSpec(self.noise_distribution, mag)

    def fed_config(self, codec: str) -> FedConfig:
        return FedConfig(
            n_clients=self.n_clients, clients_per_round=self.clients_per_round, rounds=self.rounds,
            local_epochs=self.local_epochs, local_steps=self.local_steps, batch_size=self.batch_size,
            lr=self.lr, codec=codec, noise=self.noise_for(codec), seed=self.seed,
            topk_ratio=self.topk_ratio, stochastic=self.stochastic, progressive=self.progressive,
            workers=self.workers, record_time=self.record_time,
        )

    def load_data(self) -> tuple[Dataset, Dataset]:
        """Train and held-out evaluation sets."""
        if self.dataset == "csv":
            data = load_csv(self.csv_path, header=self.csv_header)
        else:
            data = make_synthetic(SyntheticSpec(
                self.n_samples, self.n_features, self.n_classes, self.cluster_spread,
                derive_seed(self.seed, "dataset"), self.clusters_per_class, self.center_scale,
            ))
        return train_test_split(data, self.test_fraction, derive_seed(self.seed, "split"))

    def build_partition(self, train: Dataset) -> Partition:
        return make_partition(train, self.n_clients, self.partition, derive_seed(self.seed, "partition"),
                              self.beta, self.labels_per_client)

    def build_model(self, train: Dataset) -> Model:
        return build_model(self.model, train.n_features, train.n_classes, self.hidden, self.activation)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    """Check ``value`` against the declared type of ``key``; ints are accepted where floats are."""
    kind = _FIELDS[key].type
    optional = "None" in kind
    if value is None:
        if optional:
            return None
        raise ConfigError(key, "must not be null")
    base = kind.replace(" | None", "")
    if base == "bool":
        if isinstance(value, bool):
            return value
    elif base == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif base == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif base == "str":
        if isinstance(value, str):
            return value
    elif base == "list[str]":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
    raise ConfigError(key, f"expected {kind}, got {type(value).__name__} {value!r}")


def config_from_mapping(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Build a validated config; ``overrides`` (e.g. command-line flags) win over ``raw``."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping of keys to values")
    merged = dict(raw)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values = {}
    for key, value in merged.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, value)
    return RunConfig(**values).validate()


def parse_config(source: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML/JSON file path or literal text (JSON is valid YAML)."""
    if source is None:
        text = ""
    elif isinstance(source, Path) or ("\n" not in str(source) and Path(str(source)).is_file()):
        text = Path(source).read_text()
    else:
        text = str(source)
    try:
        raw = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError("<document>", f"not valid YAML/JSON: {e}") from None
    return config_from_mapping(raw, overrides)


def config_to_text(config: RunConfig) -> str:
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)
