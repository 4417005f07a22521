"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import dataclasses
import io
import math
import sys
import time
from contextlib import contextmanager, redirect_stdout

import numpy as np
import pytest

from fedmrn import analysis
from fedmrn.cli import final_accuracy, main
from fedmrn.compressors import (
    compress_drive, compress_terngrad, compress_topk, decompress, dense_fp32_bytes, encode_dense,
    encode_mask, padded_dim, Payload, rotate, unrotate,
)
from fedmrn.config import RunConfig
from fedmrn.data import SyntheticSpec, make_synthetic
from fedmrn.federation import FedConfig, local_update_fedmrn, run_training
from fedmrn.masking import deterministic_mask, mask_probability, stochastic_mask
from fedmrn.models import LogisticRegression
from fedmrn.noise import NoiseSpec
from fedmrn.rng import RngState

# learning rates picked per method from {1.0, 0.3, 0.1, 0.03, 0.01} by final accuracy on the desk task
DESK_LR = {"none": 1.0, "sign_stochastic": 1.0, "mrn_binary": 0.3}
SWEEP = (6.25e-4, 1.25e-3, 2.5e-3, 5e-3, 1e-2, 2e-2)


# conftest.py repeats these lines in pytest's terminal summary, since pytest captures stdout
VERDICTS: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    VERDICTS.append(line)
    print(line, flush=True)
    assert ok, detail


@contextmanager
def budget(seconds: float, out: dict):
    start = time.perf_counter()
    yield
    out["elapsed"] = time.perf_counter() - start
    out["ok"] = out["elapsed"] < seconds


def test_criterion_1_masking_unbiasedness():
    rng = np.random.default_rng(1)
    draws, worst, t = 10**5, 0.0, {}
    with budget(10, t):
        for i in range(50):
            mode = "binary" if i % 2 == 0 else "signed"
            n = rng.choice([-1.0, 1.0]) * rng.uniform(1e-3, 2e-2)
            u = n * rng.uniform(0.0 if mode == "binary" else -1.0, 1.0)
            noise = np.full(draws, n)
            vals = stochastic_mask(np.full(draws, u), noise, mode, RngState(i, 1)).apply(noise)
            p = mask_probability(u, n, mode)
            sd = abs(n) * math.sqrt(p * (1 - p)) * (1 if mode == "binary" else 2)
            se = sd / math.sqrt(draws)
            worst = max(worst, abs(vals.mean() - u) / se if se else (0.0 if vals.mean() == u else math.inf))
    ok = worst <= 4 and t["ok"]
    verdict(1, ok, f"worst deviation {worst:.2f} SE over 50 pairs, {t['elapsed']:.1f}s")


def test_criterion_2_deterministic_mask_bias():
    d = 10**5
    u, n = np.full(d, 0.003), np.full(d, 0.01)
    dm_err = deterministic_mask(u, n, "binary").apply(n) - u
    sm_err = stochastic_mask(u, n, "binary", RngState(2)).apply(n) - u
    se = 0.01 * math.sqrt(0.3 * 0.7 / d)
    # n - u is the exact per-coordinate error; it rounds to 0.007 in double precision
    dm_exact = bool(np.all(dm_err == 0.01 - 0.003)) and abs(dm_err.mean() - 0.007) <= 1e-15
    z = abs(sm_err.mean()) / se
    verdict(2, dm_exact and z <= 4, f"DM mean error {dm_err.mean():.6f}, SM mean error {z:.2f} SE from zero")


def test_criterion_3_progressive_masking_factor():
    t = {}
    with budget(30, t):
        check = analysis.verify_pm_factor(64, 10, NoiseSpec("uniform", 0.01), trials=10**4)
    exact = abs(analysis.pm_factor(10) - math.sqrt(0.385)) <= 1e-12
    ok = exact and check.relative_error < 0.05 and t["ok"]
    verdict(3, ok, f"pm_factor(10)={analysis.pm_factor(10):.12f}, empirical {check.empirical:.4f} "
                   f"({check.relative_error:.2%} off), {t['elapsed']:.1f}s")


def test_criterion_4_wire_exactness():
    rng = np.random.default_rng(4)
    data = make_synthetic(SyntheticSpec(n_samples=64, n_features=6, n_classes=3, seed=4))
    mismatches, bad_size = 0, 0
    for r in range(100):
        model = LogisticRegression(6, 3)
        mode = "mrn_binary" if r % 2 == 0 else "mrn_signed"
        cfg = FedConfig(codec=mode, local_steps=int(rng.integers(1, 6)), batch_size=16, lr=0.3,
                        seed=int(rng.integers(0, 2**32)))
        w = rng.normal(size=model.n_params)
        rep = local_update_fedmrn(w, model, data, cfg, round_index=int(rng.integers(1, 10**6)),
                                  client_id=int(rng.integers(0, 1000)))
        wire = Payload.from_bytes(rep.payload.to_bytes())
        mismatches += not np.array_equal(decompress(wire, cfg.noise), rep.update)
        bad_size += len(wire.body) != math.ceil(model.n_params / 8)
    ratios = set()
    for d in (8, 64, 1024, 8000):
        mask = stochastic_mask(np.zeros(d), np.ones(d), "binary", RngState(d))
        ratios.add(len(encode_dense(np.zeros(d)).body) / len(encode_mask(mask, 0).body))
        assert dense_fp32_bytes(d) == 4 * d
    ok = mismatches == 0 and bad_size == 0 and ratios == {32.0}
    verdict(4, ok, f"{mismatches} decode mismatches, {bad_size} size errors, dense/mask ratios {sorted(ratios)}")


def test_criterion_5_strongly_convex_rate():
    t = {}
    with budget(120, t):
        testbed = analysis.make_quadratic_testbed()
        mrn = analysis.run_convex(testbed, "mrn_signed", rounds=500)
        avg = analysis.run_convex(testbed, "none", rounds=500)
    slope = analysis.convergence_slope(mrn.gaps[49:], steps=np.arange(50, 501))
    # final gap: trailing 10-round mean, so one lucky round does not decide it
    gap_mrn, gap_avg = mrn.gaps[-10:].mean(), avg.gaps[-10:].mean()
    ratio = gap_mrn / gap_avg
    ok = -1.3 <= slope <= -0.7 and ratio <= 3 and t["ok"]
    verdict(5, ok, f"slope {slope:.3f}, final gap {gap_mrn:.3g} vs FedAvg {gap_avg:.3g} "
                   f"(ratio {ratio:.1f}), {t['elapsed']:.1f}s")


def _desk(codec: str, **kw) -> float:
    config = dataclasses.replace(RunConfig(), codecs=[codec], lr=DESK_LR.get(codec, DESK_LR["mrn_binary"]), **kw)
    config.validate()
    train, test = config.load_data()
    res = run_training(config.fed_config(codec), config.build_model(train), train,
                       config.build_partition(train), test)
    return final_accuracy(res.metrics)


@pytest.mark.slow
def test_criterion_6_desk_accuracy_parity():
    t = {}
    with budget(600, t):
        acc = {c: _desk(c) for c in ("none", "mrn_binary", "sign_stochastic")}
    ok = acc["mrn_binary"] >= acc["none"] - 0.02 and acc["mrn_binary"] >= acc["sign_stochastic"] and t["ok"]
    verdict(6, ok, f"FedMRN {acc['mrn_binary']:.4f}, FedAvg {acc['none']:.4f}, "
                   f"sign {acc['sign_stochastic']:.4f}, {t['elapsed']:.0f}s")


def test_criterion_7_baseline_codecs():
    x = np.array([0.5, -2.0, 2.0, 0.1, -0.5, 2.0])
    kept = np.flatnonzero(decompress(compress_topk(x, 3)))
    topk_ok = kept.tolist() == [1, 2, 5] and np.flatnonzero(decompress(compress_topk(x, 4))).tolist() == [0, 1, 2, 5]

    v = np.array([0.3, -0.05, 0.9, -1.2, 0.0, 0.6])
    s = np.abs(v).max()
    trials = 10**4
    outs = np.stack([decompress(compress_terngrad(v, RngState(7, i))) for i in range(trials)])
    bound = 4 * np.sqrt(s * np.abs(v) - v**2) / math.sqrt(trials)
    tern_ok = set(np.unique(outs)) <= {-s, 0.0, s} and bool(np.all(np.abs(outs.mean(0) - v) <= bound + 1e-12))

    rng = np.random.default_rng(7)
    drive_ok, worst_rt = True, 0.0
    for d in (1, 5, 64, 100, 1000):
        y = rng.normal(size=d)
        alpha = compress_drive(y, 3, rotate_input=False).scalars[0]
        yp = np.zeros(padded_dim(d))
        yp[:d] = y
        signs = np.where(yp >= 0, 1.0, -1.0)
        grid = alpha + np.linspace(-0.01, 0.01, 201)
        resid = [np.linalg.norm(yp - a * signs) for a in grid]
        drive_ok &= abs(alpha - yp @ signs / yp.size) <= 1e-12 * abs(alpha) and int(np.argmin(resid)) == 100
        back = unrotate(rotate(yp, 11), 11)
        worst_rt = max(worst_rt, np.linalg.norm(back - yp) / np.linalg.norm(yp))
    drive_ok &= worst_rt <= 1e-12
    verdict(7, topk_ok and tern_ok and drive_ok,
            f"top-k {topk_ok}, TernGrad {tern_ok}, DRIVE alpha/rotation {drive_ok} (round trip {worst_rt:.1e})")


def test_criterion_8_drift_bound():
    testbed = analysis.make_quadratic_testbed()
    run = analysis.run_convex(testbed, "mrn_binary", rounds=500)
    drift, bound = analysis.gradient_drift(run)
    one = analysis.run_convex(testbed, "mrn_binary", rounds=100, local_steps=1, clients_per_round=10)
    ok = bool(np.all(drift <= bound)) and bool(np.all(one.drift == 0.0))
    worst = float(np.max(drift / np.where(bound > 0, bound, np.inf)))
    verdict(8, ok, f"{drift.size} drifts, worst drift/bound {worst:.3f} (G={run.G:.1f}, q_hat={run.q_hat:.2f}); "
                   f"S=1 max drift {one.drift.max():.1e}")


def test_criterion_9_end_to_end_determinism(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("rounds: 4\nn_samples: 800\nn_clients: 20\nclients_per_round: 5\nlocal_epochs: 2\nhidden: 16\n"
                   "codecs: [none, mrn_binary, mrn_signed, sign_stochastic, topk, terngrad, drive]\n")
    runs = [("a", "1"), ("b", "1"), ("c", "4")]
    with redirect_stdout(io.StringIO()):
        codes = [main(["compare", "--config", str(cfg), "--output", str(tmp_path / name), "--workers", w])
                 for name, w in runs]
    files = sorted(p.name for p in (tmp_path / "a").glob("metrics_*.csv"))
    same = all((tmp_path / name / f).read_bytes() == (tmp_path / "a" / f).read_bytes()
               for name, _ in runs[1:] for f in files + ["summary.csv"])
    ok = codes == [0, 0, 0] and len(files) == 7 and same
    verdict(9, ok, f"{len(files)} metric files byte-identical across 2 runs and 1 vs 4 workers: {same}")


@pytest.mark.slow
def test_criterion_10_noise_magnitude_sweep():
    accs = [_desk("mrn_binary", noise_magnitude=m) for m in SWEEP]
    best = int(np.argmax(accs))
    ok = 0 < best < len(SWEEP) - 1
    verdict(10, ok, "accuracy by magnitude " + ", ".join(f"{m:g}:{a:.4f}" for m, a in zip(SWEEP, accs))
            + f"; best at {SWEEP[best]:g}")


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    failed = 0
    for fn in (test_criterion_1_masking_unbiasedness, test_criterion_2_deterministic_mask_bias,
               test_criterion_3_progressive_masking_factor, test_criterion_4_wire_exactness,
               test_criterion_5_strongly_convex_rate, test_criterion_6_desk_accuracy_parity,
               test_criterion_7_baseline_codecs, test_criterion_8_drift_bound):
        try:
            fn()
        except AssertionError:
            failed += 1
    with tempfile.TemporaryDirectory() as d:
        try:
            test_criterion_9_end_to_end_determinism(Path(d))
        except AssertionError:
            failed += 1
    try:
        test_criterion_10_noise_magnitude_sweep()
    except AssertionError:
        failed += 1
    sys.exit(1 if failed else 0)
