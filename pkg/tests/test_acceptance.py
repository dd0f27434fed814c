"""Acceptance criteria 1 to 10, one test each, each printing a pass/fail line.

Run directly with ``python3 tests/test_acceptance.py`` or through pytest.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import record
from dacal import baselines as bl
from dacal import metrics as M
from dacal._kernels import pav
from dacal.calibrator import compose
from dacal.core import CalibrationDataset, l2_normalize_rows, softmax_rows
from dacal.dac import BIAS_FLOOR, DacModel, fit_dac, rescale_logits, squared_error
from dacal.knn import DensityMatrix, build_index, build_indices, kth_distance
from dacal.synth import bayes_posterior, benchmark_config, generate, sample_base
from oracles import (
    auroc_pairs,
    average_precision_naive,
    brier_naive,
    classwise_naive,
    detection_error_naive,
    ece_mass_naive,
    ece_width_naive,
    fpr_at_tpr_naive,
    isotonic_maxmin,
    knn_full_sort,
    nll_naive,
    squared_error_naive,
)

SEEDS = range(5)
K_GRID = (1, 10, 50, 100, 200)
K_MAIN = 50


# ------------------------------------------------------------------ 1

def test_criterion_1_knn_oracle():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    failures = 0
    for i in range(200):
        k = int(rng.choice([1, 5, 17, 50]))
        m, n, d = int(rng.integers(k, 501)), int(rng.integers(1, 101)), int(rng.integers(1, 65))
        feats = rng.standard_normal((m, d)) * rng.uniform(0.1, 10)
        if i % 4 == 0:  # duplicated rows and self-queries create exact ties
            feats[m // 2 :] = feats[: m - m // 2]
        index = build_index(feats, "layer", k)
        queries = rng.standard_normal((n, d))
        queries[: min(n, m) // 2] = feats[: min(n, m) // 2]
        q = l2_normalize_rows(queries.astype(np.float32))
        got = kth_distance(index, q)
        failures += not np.array_equal(got, knn_full_sort(index.reference, q, k))
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 30
    record(1, ok, f"kNN vs full sort: {failures}/200 mismatches, {elapsed:.1f}s (limit 30s)")
    assert ok


# ------------------------------------------------------------------ 2

def _adversarial_logits(rng, c):
    base = rng.standard_normal(c).astype(np.float32) * 5
    kind = rng.integers(0, 4)
    top = int(rng.integers(0, c))
    if kind == 0:  # exact tie at the top
        base[(top + 1) % c] = base[top] = base.max() + 1
    elif kind == 1:  # one ulp apart
        base[top] = base.max() + 1
        base[(top + 1) % c] = np.nextafter(base[top], np.float32(-np.inf))
    elif kind == 2:  # all equal
        base[:] = rng.standard_normal()
    else:  # huge magnitudes with a narrow gap
        base = (rng.standard_normal(c) * 1e4).astype(np.float32)
        base[top] = base.max()
        base[(top + 1) % c] = np.nextafter(base[top], np.float32(-np.inf))
    return base.astype(np.float64)


def _random_isotonic(rng):
    knots = np.unique(rng.random(int(rng.integers(1, 12))))
    values = np.sort(rng.choice(rng.random(3), len(knots)))  # few levels, so flat stretches
    return bl.IsotonicMap(knots, values)


def test_criterion_2_accuracy_preservation():
    rng = np.random.default_rng(2)
    violations, checked = 0, 0
    for i in range(10_000 + 2_000):
        c = int(rng.integers(2, 21))
        z = _adversarial_logits(rng, c) if i >= 10_000 else rng.standard_normal(c) * rng.uniform(0.1, 40)
        z = z[None, :]
        ref = int(np.argmax(z))
        n_layers = int(rng.integers(0, 4))
        names = [f"l{j}" for j in range(n_layers)]
        model = DacModel(names, rng.exponential(5, n_layers) * (rng.random(n_layers) < 0.7),
                         BIAS_FLOOR if rng.random() < 0.1 else rng.uniform(BIAS_FLOOR, 5))
        dens = DensityMatrix(rng.uniform(0, 2, (1, n_layers)), names)
        ts = bl.TempScaler(float(np.exp(rng.uniform(-3, 3))))
        ets = bl.EtsModel(ts.temperature, tuple(rng.dirichlet(np.ones(3))))
        probs = softmax_rows(z)
        outputs = [
            rescale_logits(model, z, dens),
            bl.apply_ts(ts, z),
            bl.apply_ets(ets, z),
            bl.apply_irm(_random_isotonic(rng), probs),
        ]
        for out in outputs:
            checked += 1
            violations += int(np.argmax(out)) != ref
    ok = violations == 0
    record(2, ok, f"argmax invariance under DAC/TS/ETS/IRM: {violations} violations in {checked} checks")
    assert ok


# ------------------------------------------------------------------ 3

def test_criterion_3_gradient_check():
    rng = np.random.default_rng(3)
    h, worst = 1e-4, 0.0
    for _ in range(100):
        n, c, layers = int(rng.integers(5, 60)), int(rng.integers(2, 10)), int(rng.integers(1, 5))
        z = rng.standard_normal((n, c)) * rng.uniform(0.5, 6)
        onehot = np.eye(c)[rng.integers(0, c, n)]
        dens = rng.uniform(0, 1.5, (n, layers))
        p = np.concatenate([[rng.uniform(0.3, 2)], rng.uniform(0, 2, layers)])
        _, g = squared_error(p, z, onehot, dens)
        fd = np.array([
            (squared_error(p + h * e, z, onehot, dens, False) - squared_error(p - h * e, z, onehot, dens, False)) / (2 * h)
            for e in np.eye(len(p))
        ])
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    ok = worst <= 1e-4
    record(3, ok, f"analytic vs central-difference gradient: worst relative error {worst:.2e} (limit 1e-4)")
    assert ok


# ------------------------------------------------------------------ 4

def _golden_scan_w0(z, y):
    def loss(w0):
        return squared_error_naive(w0, [], z, y, np.zeros((len(y), 0)))

    grid = np.exp(np.linspace(-4, 4, 161))
    i = int(np.argmin([loss(w) for w in grid]))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(loss, bracket=(lo, grid[i], hi), method="golden", tol=1e-10)
    return res.fun


def test_criterion_4_ts_reduction():
    rng = np.random.default_rng(4)
    worst, nonzero = 0.0, 0
    for _ in range(5):
        n, c = int(rng.integers(100, 400)), int(rng.integers(2, 10))
        true = rng.standard_normal((n, c)) * rng.uniform(0.5, 3)
        y = np.array([rng.choice(c, p=p) for p in softmax_rows(true)])
        z = (true * rng.uniform(0.3, 4)).astype(np.float32)
        val = CalibrationDataset("val", z, {"a": np.ones((n, 2)), "b": np.ones((n, 2))}, c, y)
        model, report = fit_dac(val, DensityMatrix.zeros(n, ["a", "b"]))
        nonzero += int(np.count_nonzero(model.weights))
        best = _golden_scan_w0(z.astype(np.float64), y)
        worst = max(worst, abs(report.final_loss - best) / best)
    ok = worst <= 1e-4 and nonzero == 0
    record(4, ok, f"zero densities: loss vs golden scan worst rel {worst:.2e} (limit 1e-4), {nonzero} nonzero weights")
    assert ok


# ------------------------------------------------------------------ 5

def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mean_gap, exact_fail = 0.0, 0
    for i in range(100):
        n, c = int(rng.integers(15, 301)), int(rng.integers(2, 8))
        logits = rng.standard_normal((n, c)) * rng.uniform(0.2, 4)
        p = softmax_rows(logits)
        if i % 3 == 0:
            p = np.clip(np.round(p * 10) / 10, 0, 1)
            p[:, 0] = np.clip(1 - p[:, 1:].sum(axis=1), 0, 1)
        y = rng.integers(0, c, n)
        pairs = [
            (M.ece_equal_width(p, y)[0], ece_width_naive(p, y, 15)),
            (M.ece_equal_mass(p, y)[0], ece_mass_naive(p, y, 15)),
            (M.classwise_ece(p, y)[0], classwise_naive(p, y, 15)),
            (M.brier(p, y), brier_naive(p, y)),
            (M.nll(p, y), nll_naive(p, y)),
        ]
        mean_gap = max(mean_gap, max(abs(a - b) for a, b in pairs))
        n_in, n_out = rng.integers(1, 300, size=2)
        if i % 2:
            pos, neg = rng.integers(0, 8, n_in) / 7, rng.integers(0, 8, n_out) / 7
        else:
            pos, neg = rng.beta(3, 1, n_in), rng.beta(1, 2, n_out)
        s = M.OodScores(pos, neg)
        exact = [
            (M.auroc(s), auroc_pairs(list(pos), list(neg))),
            (M.aupr(s, "in"), average_precision_naive(list(pos), list(neg))),
            (M.aupr(s, "out"), average_precision_naive(list(-neg), list(-pos))),
            (M.fpr_at_tpr(s), fpr_at_tpr_naive(list(pos), list(neg))),
            (M.detection_error(s), detection_error_naive(list(pos), list(neg))),
        ]
        exact_fail += sum(a != b for a, b in exact)
    elapsed = time.perf_counter() - t0
    ok = mean_gap <= 1e-12 and exact_fail == 0 and elapsed < 60
    record(5, ok, f"metric oracles: worst mean-metric gap {mean_gap:.1e}, {exact_fail} inexact rank/threshold "
                  f"results, {elapsed:.1f}s (limit 60s)")
    assert ok


# ------------------------------------------------------------------ 6

def test_criterion_6_pav_optimality():
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(2000):
        n = int(rng.integers(1, 51))
        y = rng.integers(0, 2, n).astype(float) if i % 2 else rng.standard_normal(n)
        w = rng.uniform(0.1, 3, n) if i % 3 == 0 else None
        worst = max(worst, float(np.max(np.abs(pav(y, w) - isotonic_maxmin(y, w)))))
    ok = worst <= 1e-12
    record(6, ok, f"PAV vs max-min oracle on 2000 instances (n <= 50): worst gap {worst:.1e}")
    assert ok


# ------------------------------------------------------------------ 7, 8, 9

def _bayes_in_domain_ece(cfg):
    u, y = sample_base(cfg, 5000)
    return M.ece_equal_width(bayes_posterior(cfg, u), y)[0]


def _run_seed(seed, ks):
    cfg = benchmark_config(seed)
    sp = generate(cfg)
    shifts = [sp[f"severity_{i}"] for i in range(len(cfg.shift_severities))]
    ts, _ = compose("ts", sp["val"])
    out = {
        "ts_ece": [M.ece_equal_width(ts.predict_proba(d), d.labels)[0] for d in shifts],
        "ts_auroc": M.auroc(M.OodScores.from_probs(ts.predict_proba(sp["test"]), ts.predict_proba(sp["ood"]))),
        "dac_ece": {},
        "dac_auroc": {},
        "bayes_ece": _bayes_in_domain_ece(cfg),
    }
    for k in ks:
        indices = build_indices(sp["train"], {n: k for n in cfg.layer_names})
        model, _ = compose("ts+dac", sp["val"], indices=indices)
        out["dac_ece"][k] = [M.ece_equal_width(model.predict_proba(d, indices), d.labels)[0] for d in shifts]
        if k == K_MAIN:
            out["dac_auroc"][k] = M.auroc(M.OodScores.from_probs(model.predict_proba(sp["test"], indices),
                                                                 model.predict_proba(sp["ood"], indices)))
    return out


@pytest.fixture(scope="module")
def main_runs():
    t0 = time.perf_counter()
    runs = [_run_seed(s, (K_MAIN,)) for s in SEEDS]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_shift_benchmark(main_runs):
    runs, elapsed = main_runs
    macro_ts = np.array([np.mean(r["ts_ece"]) for r in runs])
    macro_dac = np.array([np.mean(r["dac_ece"][K_MAIN]) for r in runs])
    wins = int(np.sum(macro_dac < macro_ts))
    top_ratio = np.mean([r["dac_ece"][K_MAIN][-1] for r in runs]) / np.mean([r["ts_ece"][-1] for r in runs])
    in_gap = max(abs(r["dac_ece"][K_MAIN][0] - r["ts_ece"][0]) for r in runs)
    bayes = max(r["bayes_ece"] for r in runs)
    ok = wins >= 4 and top_ratio <= 0.8 and in_gap <= 0.01 and elapsed < 300
    record(7, ok, f"shift benchmark k={K_MAIN}: (a) {wins}/5 seeds lower macro ECE "
                  f"(TS {macro_ts.mean():.4f} -> TS+DAC {macro_dac.mean():.4f}); (b) top-severity ratio "
                  f"{top_ratio:.3f} (limit 0.8); (c) in-domain |diff| {in_gap:.4f} (limit 0.01); "
                  f"Bayes in-domain ECE {bayes:.4f}; {elapsed:.0f}s (limit 300s)")
    assert ok


@pytest.mark.slow
def test_criterion_8_k_sensitivity(main_runs):
    runs, _ = main_runs
    others = [k for k in K_GRID if k != K_MAIN]
    extra = [_run_seed(s, others) for s in SEEDS]
    wins = {}
    for k in K_GRID:
        src = runs if k == K_MAIN else extra
        wins[k] = sum(np.mean(r["dac_ece"][k]) < np.mean(r["ts_ece"]) for r in src)
    ok = all(v >= 4 for v in wins.values())
    record(8, ok, "k sweep seeds where TS+DAC beats TS: " + ", ".join(f"k={k}: {v}/5" for k, v in wins.items()))
    assert ok


@pytest.mark.slow
def test_criterion_9_ood_auroc(main_runs):
    runs, _ = main_runs
    wins = sum(r["dac_auroc"][K_MAIN] >= r["ts_auroc"] for r in runs)
    ts_mean = np.mean([r["ts_auroc"] for r in runs])
    dac_mean = np.mean([r["dac_auroc"][K_MAIN] for r in runs])
    ok = wins >= 4
    record(9, ok, f"OOD AUROC TS+DAC >= TS in {wins}/5 seeds (mean {ts_mean:.4f} -> {dac_mean:.4f})")
    assert ok


# ------------------------------------------------------------------ 10

def _cli_pipeline(root: Path, threads: int) -> None:
    env = dict(os.environ, NUMBA_NUM_THREADS=str(max(threads, 1)))
    data, m = root / "data", str(root / "data" / "manifest.json")
    t = ["--threads", str(threads)]
    steps = [
        ["synth", "--out", str(data), "--seed", "11", "--n-train", "1500", "--n-val", "600", "--n-test", "800",
         "--k", "20"],
        ["build-index", "--manifest", m, "--out", str(root / "index")],
        ["fit", "--manifest", m, "--method", "ts+dac", "--index-dir", str(root / "index"), "--out", str(root / "fit")],
        ["fit", "--manifest", m, "--method", "ets+dac", "--out", str(root / "fit_ets")],
        ["calibrate", "--manifest", m, "--model", str(root / "fit" / "model.json"), "--split", "severity_3",
         "--out", str(root / "cal")],
        ["evaluate", "--manifest", m, "--model", str(root / "fit" / "model.json"), "--out", str(root / "eval")],
        ["ood", "--manifest", m, "--model", str(root / "fit" / "model.json"), "--out", str(root / "ood")],
        ["k-sweep", "--manifest", m, "--k-list", "5,20", "--out", str(root / "ksweep")],
        ["data-efficiency", "--manifest", m, "--fractions", "0.5,1.0", "--repeats", "2", "--out", str(root / "de")],
        ["report-layers", "--model", str(root / "fit" / "model.json"), "--out", str(root / "layers")],
    ]
    for step in steps:
        proc = subprocess.run([sys.executable, "-m", "dacal.cli", *step, *t], env=env, capture_output=True,
                              text=True, timeout=600)
        assert proc.returncode == 0, (step, proc.stderr)


def _report_files(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "run_meta.json"
    }


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    runs = {"t1": 1, "t1_rerun": 1, "t8": 8}
    for name, threads in runs.items():
        _cli_pipeline(tmp_path / name, threads)
    ref = _report_files(tmp_path / "t1")
    diffs = []
    for name in ("t1_rerun", "t8"):
        other = _report_files(tmp_path / name)
        if set(other) != set(ref):
            diffs.append(f"{name}: file sets differ")
        diffs += [f"{name}:{f}" for f in ref if f in other and other[f] != ref[f]]
    ok = not diffs
    record(10, ok, f"CLI reruns at 1 and 8 threads: {len(ref)} report files compared, "
                   f"{len(diffs)} differ" + (f" ({diffs[:3]})" if diffs else ""))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
