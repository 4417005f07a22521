"""Command-line runner.

    python -m fedmrn train   --config run.yaml [--codec mrn_binary] [flags]
    python -m fedmrn compare --config run.yaml [--codecs none,mrn_binary,sign_stochastic]
    python -m fedmrn probe   --config run.yaml [--probes q,pm_factor]
    python -m fedmrn partition-inspect --config run.yaml

Any config key can be overridden with ``--key value`` (dashes or
underscores); flags win over the file. Exit status: 0 success, 1 config
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig, config_to_text, parse_config
from .federation import RoundMetrics, run_training
from .metrics import MetricsWriter
from .noise import NoiseSpec

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SUMMARY_FIELDS = ("codec", "final_accuracy", "total_uplink_bytes")


def _flag_type(f: dataclasses.Field):
    base = f.type.replace(" | None", "")
    if base == "bool":
        def parse_bool(s: str) -> bool:
            table = {"true": True, "1": True, "false": False, "0": False}
            if s.lower() not in table:
                raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")
            return table[s.lower()]
        return parse_bool
    return {"int": int, "float": float}.get(base, str)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are configuration errors, not runtime failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedmrn", description="Federated training with masked random noise.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train one codec"), ("compare", "train every listed codec"),
                            ("probe", "run theory probes"), ("partition-inspect", "print shard statistics")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML or JSON config file")
        if name == "train":
            p.add_argument("--codec", help="codec to train (default: first in codecs)")
        for f in dataclasses.fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            aliases = [flag] if flag == "--" + f.name else [flag, "--" + f.name]
            p.add_argument(*aliases, dest=f.name, type=_flag_type(f), default=None,
                           metavar=f.name.upper(), help=argparse.SUPPRESS)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)
            if getattr(args, f.name, None) is not None}


def final_accuracy(metrics: list[RoundMetrics], window: int = 5) -> float:
    return float(np.mean([m.eval_accuracy for m in metrics[-window:]]))


def train_one(config: RunConfig, codec: str, out_dir: Path, data=None) -> list[RoundMetrics]:
    """Train ``codec`` and stream its metrics to ``out_dir/metrics_<codec>.csv``."""
    train, test = data if data is not None else config.load_data()
    partition = config.build_partition(train)
    model = config.build_model(train)
    with open(out_dir / f"metrics_{codec}.csv", "w", newline="") as f:
        writer = MetricsWriter(f)
        result = run_training(config.fed_config(codec), model, train, partition, test,
                              on_metrics=writer.emit)
    return result.metrics


def run_compare(config: RunConfig, codecs: list[str] | None = None, parallel: bool = False) -> list[tuple]:
    """Train each codec under the same seed, data and partition; write metrics and a summary table."""
    codecs = list(codecs or config.codecs)
    out_dir = Path(config.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = config.load_data()
    if parallel and len(codecs) > 1:
        with ThreadPoolExecutor(len(codecs)) as pool:
            streams = list(pool.map(lambda c: train_one(config, c, out_dir, data), codecs))
    else:
        streams = [train_one(config, c, out_dir, data) for c in codecs]
    rows = [(c, final_accuracy(ms), sum(m.uplink_bytes for m in ms)) for c, ms in zip(codecs, streams)]
    with open(out_dir / "summary.csv", "w", newline="") as f:
        f.write(",".join(SUMMARY_FIELDS) + "\n")
        for codec, acc, total in rows:
            f.write(f"{codec},{acc!r},{total}\n")
    (out_dir / "config.json").write_text(config_to_text(config) + "\n")
    return rows


def format_summary(rows) -> str:
    width = max(len("codec"), *(len(r[0]) for r in rows))
    lines = [f"{'codec':<{width}}  {'final acc':>9}  {'uplink bytes':>14}"]
    lines += [f"{c:<{width}}  {a:>9.4f}  {b:>14d}" for c, a, b in rows]
    return "\n".join(lines)


def run_probe(config: RunConfig) -> analysis.AnalysisReport:
    """Run the selected probes and append the report to ``output/analysis.jsonl``."""
    report = analysis.AnalysisReport()
    mode = "binary"
    spec = config.noise_for("mrn_binary") if config.noise_magnitude is None else \
        NoiseSpec(config.noise_distribution, config.noise_magnitude)
    if "q" in config.probes:
        d = 1000
        noise = spec.magnitude * np.ones(d)
        report.q_hat = analysis.estimate_q([noise / 2], noise, mode, min(config.probe_trials, 10_000), config.seed)
    if "pm_factor" in config.probes:
        S = config.local_steps or 10
        check = analysis.verify_pm_factor(100, S, spec, config.probe_trials, seed=config.seed)
        report.pm_factor_hat = check.empirical
        report.extras["pm_factor"] = check.analytic
    if "slope" in config.probes or "drift" in config.probes:
        testbed = analysis.make_quadratic_testbed(seed=config.seed)
    if "slope" in config.probes:
        run = analysis.run_convex(testbed, "mrn_signed", rounds=config.probe_rounds, seed=config.seed)
        report.slope_hat = analysis.convergence_slope(run.gaps, burn_in=min(49, config.probe_rounds - 2))
        report.extras["max_update_noise_ratio"] = run.max_ratio
    if "drift" in config.probes:
        run = analysis.run_convex(testbed, "mrn_binary", rounds=min(config.probe_rounds, 100), seed=config.seed)
        drift, bound = analysis.gradient_drift(run)
        report.drift = drift.tolist()
        report.extras["drift_within_bound"] = bool(np.all(drift <= bound))
        report.extras["drift_q_hat"] = run.q_hat
    out_dir = Path(config.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "analysis.jsonl", "a") as f:
        f.write(report.to_json() + "\n")
    return report


def partition_table(config: RunConfig) -> str:
    train, _ = config.load_data()
    part = config.build_partition(train)
    header = "client,size," + ",".join(f"label_{c}" for c in range(train.n_classes))
    lines = [header]
    for k, idx in enumerate(part.assignments):
        counts = np.bincount(train.labels[idx], minlength=train.n_classes)
        lines.append(f"{k},{idx.size}," + ",".join(str(int(c)) for c in counts))
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None and not Path(args.config).is_file():
            raise ConfigError("config", f"cannot read {args.config}")
        config = parse_config(Path(args.config) if args.config else None, _overrides(args))
        codec = getattr(args, "codec", None)
        if codec is not None:
            config = dataclasses.replace(config, codecs=[codec]).validate()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command in ("train", "compare"):
            codecs = config.codecs[:1] if args.command == "train" else config.codecs
            rows = run_compare(config, codecs)
            print(format_summary(rows))
        elif args.command == "probe":
            report = run_probe(config)
            print(report.to_json())
        else:
            print(partition_table(config))
    except Exception as e:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
