"""Experiment drivers behind the CLI: evaluation, OOD, k-sweep, data efficiency."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics as M
from .calibrator import CalibratorModel, compose, parse_method
from .core import CalibrationDataset
from .errors import ConfigError
from .io import Manifest
from .knn import KnnIndex, build_index, build_indices

logger = logging.getLogger(__name__)

EVAL_KINDS = ("test", "shift")


def write_csv(rows: list[dict], path, columns: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------- indices

def indices_for_model(
    manifest: Manifest,
    model: CalibratorModel,
    index_dir=None,
    train: CalibrationDataset | None = None,
) -> list[KnnIndex] | None:
    """Load (or deterministically rebuild) the indices a DAC model was fitted with."""
    if model.dac is None:
        return None
    dac = model.dac
    if index_dir is not None:
        indices = [KnnIndex.load(index_dir, name) for name in dac.layer_names]
    else:
        train = train if train is not None else manifest.load_split("train")
        indices = [
            build_index(train.layers[name], name, dac.k_per_layer[name], model.subsample_fraction, model.seed)
            for name in dac.layer_names
        ]
    for ix in indices:
        if ix.k != dac.k_per_layer[ix.layer_name]:
            raise ConfigError(
                f"index for {ix.layer_name!r} has k={ix.k}, model was fitted with k={dac.k_per_layer[ix.layer_name]}"
            )
        want = dac.index_checksums.get(ix.layer_name)
        if want and want != ix.checksum():
            raise ConfigError(f"index for {ix.layer_name!r} does not match the one the model was fitted with")
    return indices


def manifest_indices(manifest: Manifest, k: int | None = None, subsample=None, seed=None,
                     train: CalibrationDataset | None = None) -> list[KnnIndex]:
    train = train if train is not None else manifest.load_split("train")
    kp = {n: int(k) for n in manifest.layers} if k is not None else manifest.k_per_layer
    frac = manifest.subsample_fraction if subsample is None else subsample
    return build_indices(train, kp, frac, manifest.seed if seed is None else seed)


def fit_from_manifest(manifest: Manifest, method: str, indices=None, val_split: str = "val",
                      k: int | None = None, subsample=None, seed=None) -> tuple[CalibratorModel, list | None]:
    _, use_dac = parse_method(method)
    val = manifest.load_split(val_split)
    frac = manifest.subsample_fraction if subsample is None else subsample
    seed = manifest.seed if seed is None else seed
    if use_dac and indices is None:
        indices = manifest_indices(manifest, k, frac, seed)
    return compose(method, val, indices=indices if use_dac else None, subsample_fraction=frac, seed=seed)


# ------------------------------------------------------------- evaluation

def default_eval_splits(manifest: Manifest) -> list[str]:
    names = [n for n, r in manifest.splits.items() if r.labels is not None and r.meta.get("kind") in EVAL_KINDS]
    if not names:
        names = [n for n, r in manifest.splits.items() if r.labels is not None and n not in ("train", "val")]
    return names


def _split_metrics(model, indices, ds: CalibrationDataset, metric_names, bins):
    probs = model.predict_proba(ds, indices)
    y = ds.require_labels()
    values = {}
    for name in metric_names:
        if name not in M.METRICS:
            raise ConfigError(f"unknown metric {name!r} (have {sorted(M.METRICS)})")
        values[name] = M.METRICS[name](probs, y, bins)
    rel = {
        "equal-width": M.reliability_data(probs, y, bins, "equal-width"),
        "equal-mass": M.reliability_data(probs, y, bins, "equal-mass") if len(y) >= bins else None,
    }
    return values, rel


def evaluate(
    model: CalibratorModel,
    indices,
    datasets: list[CalibrationDataset],
    metric_names=("ece",),
    bins: int = M.DEFAULT_BINS,
    threads: int = 1,
) -> dict:
    """Metrics per split, macro averages over shifted splits, per-severity lines."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda ds: _split_metrics(model, indices, ds, metric_names, bins), datasets))
    rows, reliability = [], {}
    for ds, (values, rel) in zip(datasets, results):
        for name in metric_names:
            rows.append({
                "split": ds.split_name,
                "kind": ds.meta.get("kind", ""),
                "severity": ds.meta.get("severity", ""),
                "corruption": ds.meta.get("corruption", ""),
                "method": model.method,
                "metric": name,
                "value": values[name],
            })
        reliability[ds.split_name] = rel
    return {"rows": rows, "summary": summarize(rows, metric_names), "reliability": reliability}


def summarize(rows: list[dict], metric_names) -> dict:
    """Macro average over every shifted (corruption, severity) cell, severity 0 included once."""
    summary = {}
    for name in metric_names:
        cells = [r for r in rows if r["metric"] == name and r["kind"] == "shift"]
        if not cells:
            cells = [r for r in rows if r["metric"] == name]
        per_sev = defaultdict(list)
        for r in cells:
            per_sev[r["severity"]].append(r["value"])
        summary[name] = {
            "macro": M.macro_average(r["value"] for r in cells),
            "n_conditions": len(cells),
            "per_severity": {str(k): M.macro_average(v) for k, v in sorted(per_sev.items(), key=lambda kv: str(kv[0]))},
        }
    return summary


def macro_ece(model, indices, datasets, bins: int = M.DEFAULT_BINS) -> float:
    return evaluate(model, indices, datasets, ("ece",), bins)["summary"]["ece"]["macro"]


def write_evaluation(result: dict, out_dir) -> None:
    from .io import dump_json

    out_dir = Path(out_dir)
    write_csv(result["rows"], out_dir / "metrics.csv",
              ["split", "kind", "severity", "corruption", "method", "metric", "value"])
    dump_json(result["summary"], out_dir / "summary.json")
    for split, rel in result["reliability"].items():
        for scheme, stats in rel.items():
            if stats is not None:
                write_csv(stats.rows(), out_dir / "reliability" / f"{split}_{scheme}.csv",
                          ["bin", "lower", "upper", "conf", "acc", "count"])


# -------------------------------------------------------------------- OOD

def ood_evaluation(model, indices, in_ds: CalibrationDataset, ood_ds: CalibrationDataset) -> dict:
    scores = M.OodScores.from_probs(model.predict_proba(in_ds, indices), model.predict_proba(ood_ds, indices))
    return {
        "method": model.method,
        "in_split": in_ds.split_name,
        "ood_split": ood_ds.split_name,
        "metrics": M.ood_report(scores),
        "in_confidence": M.quartiles(scores.in_scores),
        "out_confidence": M.quartiles(scores.out_scores),
    }


# ----------------------------------------------------------------- sweeps

def k_sweep(manifest: Manifest, ks, method: str, split_names=None, bins: int = M.DEFAULT_BINS) -> list[dict]:
    """Refit ``method`` for each k; the base method without DAC is the reference."""
    base_kind, use_dac = parse_method(method)
    if not use_dac:
        raise ConfigError("k-sweep needs a +dac method")
    train = manifest.load_split("train")
    val = manifest.load_split("val")
    datasets = [manifest.load_split(n) for n in (split_names or default_eval_splits(manifest))]
    ref_model, _ = compose(base_kind, val)
    ref = macro_ece(ref_model, None, datasets, bins)
    rows = []
    for k in sorted(set(int(k) for k in ks)):
        indices = manifest_indices(manifest, k=k, train=train)
        model, indices = compose(method, val, indices=indices, subsample_fraction=manifest.subsample_fraction,
                                 seed=manifest.seed)
        rows.append({
            "k": k,
            "method": method,
            "macro_ece": macro_ece(model, indices, datasets, bins),
            "base_method": base_kind,
            "base_macro_ece": ref,
        })
    return rows


def validation_subsample(n: int, fraction: float, seed: int, repeat: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ConfigError(f"validation fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(n)
    size = int(round(n * fraction))
    if size < 2:
        raise ConfigError(f"validation fraction {fraction} leaves {size} sample(s); need at least 2")
    rng = np.random.default_rng([seed, repeat])
    return np.sort(rng.permutation(n)[:size])


def data_efficiency(manifest: Manifest, fractions, repeats: int, seed: int, methods,
                    split_names=None, bins: int = M.DEFAULT_BINS) -> tuple[list[dict], list[dict]]:
    """Refit on random validation subsets; returns per-run rows and per-fraction summaries."""
    val = manifest.load_split("val")
    datasets = [manifest.load_split(n) for n in (split_names or default_eval_splits(manifest))]
    needs_dac = any(parse_method(m)[1] for m in methods)
    indices = manifest_indices(manifest) if needs_dac else None
    rows = []
    for frac in sorted(set(float(f) for f in fractions)):
        for rep in range(repeats):
            sub = val.subset(validation_subsample(len(val), frac, seed, rep))
            for method in methods:
                use_dac = parse_method(method)[1]
                model, ix = compose(method, sub, indices=indices if use_dac else None,
                                    subsample_fraction=manifest.subsample_fraction, seed=manifest.seed)
                rows.append({
                    "fraction": frac,
                    "repeat": rep,
                    "n_val": len(sub),
                    "method": method,
                    "macro_ece": macro_ece(model, ix, datasets, bins),
                })
    summary = []
    for frac in sorted({r["fraction"] for r in rows}):
        for method in methods:
            vals = np.array([r["macro_ece"] for r in rows if r["fraction"] == frac and r["method"] == method])
            summary.append({
                "fraction": frac,
                "method": method,
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "min": float(vals.min()),
                "max": float(vals.max()),
            })
    return rows, summary


def layer_report(model: CalibratorModel) -> list[dict]:
    if model.dac is None:
        raise ConfigError(f"method {model.method!r} has no DAC layer weights")
    dac = model.dac
    shares = dac.weight_shares()
    rows = [{"component": "bias", "weight": dac.bias, "share": shares["bias"]}]
    rows += [
        {"component": n, "weight": float(w), "share": shares[n]}
        for n, w in zip(dac.layer_names, dac.weights)
    ]
    return rows
