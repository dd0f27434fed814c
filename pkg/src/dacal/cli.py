"""``dacal`` command line.

Every command writes deterministic CSV/JSON reports into ``--out``; wall-clock
and host details go to a separate ``run_meta.json`` so reports can be compared
byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from ._accel import backend, set_threads
from .calibrator import CalibratorModel, parse_method
from .errors import ConfigError, ConvergenceWarning, DacError
from .io import dump_json, load_manifest, save_tensor
from .knn import build_indices
from .metrics import DEFAULT_BINS, METRICS
from .synth import benchmark_config, write_experiment

logger = logging.getLogger("dacal")

EXIT_STRICT = 4


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from None


def _write_meta(out_dir: Path, args, started: float) -> None:
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": __version__,
        "backend": backend(),
        "threads": args.threads,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_unix": started,
        "elapsed_s": time.time() - started,
    }
    dump_json(meta, out_dir / "run_meta.json")


def _load_model(path) -> CalibratorModel:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return CalibratorModel.from_json(doc)


def _model_and_indices(args):
    manifest = load_manifest(args.manifest)
    model = _load_model(args.model)
    return manifest, model, pipeline.indices_for_model(manifest, model, args.index_dir)


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    cfg = benchmark_config(seed=args.seed or 0, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                           n_ood=args.n_test, miscalibration_temperature=args.temperature)
    write_experiment(cfg, args.out, k=args.k or 50, subsample_fraction=args.subsample or 1.0,
                     methods=_csv_list(args.method) if args.method else ("ts", "ts+dac"))


def cmd_build_index(args) -> None:
    manifest = load_manifest(args.manifest)
    kp = {n: args.k for n in manifest.layers} if args.k else manifest.k_per_layer
    frac = manifest.subsample_fraction if args.subsample is None else args.subsample
    seed = manifest.seed if args.seed is None else args.seed
    indices = build_indices(manifest.load_split("train"), kp, frac, seed)
    out = Path(args.out)
    for ix in indices:
        ix.save(out)
    dump_json({ix.layer_name: ix.sidecar() for ix in indices}, out / "indices.json")


def cmd_fit(args) -> int:
    manifest = load_manifest(args.manifest)
    parse_method(args.method)
    indices = None
    if args.index_dir and parse_method(args.method)[1]:
        from .knn import KnnIndex

        indices = [KnnIndex.load(args.index_dir, n) for n in manifest.layers]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        model, _ = pipeline.fit_from_manifest(manifest, args.method, indices=indices, val_split=args.val_split,
                                              k=args.k, subsample=args.subsample, seed=args.seed)
    nonconverged = [w for w in caught if issubclass(w.category, ConvergenceWarning)]
    for w in caught:
        if not issubclass(w.category, ConvergenceWarning):
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    for w in nonconverged:
        logger.warning("%s", w.message)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(model.to_json(), out / "model.json")
    if model.dac is not None and model.dac.fit_report is not None:
        from dataclasses import asdict

        dump_json(asdict(model.dac.fit_report), out / "fit_report.json")
    if nonconverged and args.strict:
        logger.error("non-convergence escalated by --strict")
        return EXIT_STRICT
    return 0


def cmd_calibrate(args) -> None:
    manifest, model, indices = _model_and_indices(args)
    probs = model.predict_proba(manifest.load_split(args.split), indices)
    out = Path(args.out)
    save_tensor(probs.astype(np.float32), out / f"{args.split}_probs.dact")


def cmd_evaluate(args) -> None:
    manifest, model, indices = _model_and_indices(args)
    names = _csv_list(args.splits) if args.splits else pipeline.default_eval_splits(manifest)
    metric_names = _csv_list(args.metrics)
    bad = [m for m in metric_names if m not in METRICS]
    if bad:
        raise ConfigError(f"unknown metric(s) {bad}; choose from {sorted(METRICS)}")
    datasets = [manifest.load_split(n) for n in names]
    result = pipeline.evaluate(model, indices, datasets, metric_names, args.bins, args.threads)
    pipeline.write_evaluation(result, args.out)


def cmd_ood(args) -> None:
    manifest, model, indices = _model_and_indices(args)
    report = pipeline.ood_evaluation(model, indices, manifest.load_split(args.in_split),
                                     manifest.load_split(args.ood_split))
    out = Path(args.out)
    dump_json(report, out / "ood.json")
    pipeline.write_csv([{"metric": k, "value": v} for k, v in report["metrics"].items()],
                       out / "ood.csv", ["metric", "value"])


def cmd_k_sweep(args) -> None:
    manifest = load_manifest(args.manifest)
    splits = _csv_list(args.splits) if args.splits else None
    rows = pipeline.k_sweep(manifest, _csv_list(args.k_list, int), args.method, splits, args.bins)
    out = Path(args.out)
    pipeline.write_csv(rows, out / "k_sweep.csv", ["k", "method", "macro_ece", "base_method", "base_macro_ece"])
    dump_json(rows, out / "k_sweep.json")


def cmd_data_efficiency(args) -> None:
    manifest = load_manifest(args.manifest)
    splits = _csv_list(args.splits) if args.splits else None
    methods = _csv_list(args.method) if args.method else ["ts", "ts+dac"]
    seed = manifest.seed if args.seed is None else args.seed
    rows, summary = pipeline.data_efficiency(manifest, _csv_list(args.fractions, float), args.repeats,
                                             seed, methods, splits, args.bins)
    out = Path(args.out)
    pipeline.write_csv(rows, out / "data_efficiency_runs.csv", ["fraction", "repeat", "n_val", "method", "macro_ece"])
    pipeline.write_csv(summary, out / "data_efficiency.csv", ["fraction", "method", "mean", "std", "min", "max"])


def cmd_report_layers(args) -> None:
    model = _load_model(args.model)
    pipeline.write_csv(pipeline.layer_report(model), Path(args.out) / "layer_weights.csv",
                       ["component", "weight", "share"])


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dacal", description="Density-aware post-hoc calibration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker cap (kNN and per-split evaluation)")
    common.add_argument("--seed", type=int, default=None, help="overrides the manifest seed")
    common.add_argument("--bins", type=int, default=DEFAULT_BINS)
    common.add_argument("--k", type=int, default=None, help="same k for every layer")
    common.add_argument("--subsample", type=float, default=None, help="fraction of train rows in the index")
    common.add_argument("--strict", action="store_true", help="exit 4 on optimizer non-convergence")

    def with_manifest(p):
        p.add_argument("--manifest", required=True)
        return p

    def with_model(p):
        p.add_argument("--model", required=True, help="model.json written by `fit`")
        p.add_argument("--index-dir", default=None, help="prebuilt indices; rebuilt from the manifest if omitted")
        return p

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark experiment")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-val", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=5000)
    p.add_argument("--temperature", type=float, default=3.0, help="logit miscalibration factor")
    p.add_argument("--method", default=None, help="comma-separated methods recorded in the manifest")
    p.set_defaults(func=cmd_synth)

    p = with_manifest(sub.add_parser("build-index", parents=[common], help="build kNN indices from train"))
    p.set_defaults(func=cmd_build_index)

    p = with_manifest(sub.add_parser("fit", parents=[common], help="fit a calibrator on the validation split"))
    p.add_argument("--method", required=True, help="<base>[+dac], base in ts|ets|irm|ir|none")
    p.add_argument("--val-split", default="val")
    p.add_argument("--index-dir", default=None)
    p.set_defaults(func=cmd_fit)

    p = with_model(with_manifest(sub.add_parser("calibrate", parents=[common], help="write calibrated probabilities")))
    p.add_argument("--split", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = with_model(with_manifest(sub.add_parser("evaluate", parents=[common], help="calibration metrics per split")))
    p.add_argument("--splits", default=None, help="comma-separated; default: test and shifted splits")
    p.add_argument("--metrics", default="ece,ece_mass,classwise_ece,brier,nll,accuracy")
    p.set_defaults(func=cmd_evaluate)

    p = with_model(with_manifest(sub.add_parser("ood", parents=[common], help="OOD detection report")))
    p.add_argument("--in-split", default="test")
    p.add_argument("--ood-split", default="ood")
    p.set_defaults(func=cmd_ood)

    p = with_manifest(sub.add_parser("k-sweep", parents=[common], help="refit and evaluate for several k"))
    p.add_argument("--method", default="ts+dac")
    p.add_argument("--k-list", default="1,10,50,100,200")
    p.add_argument("--splits", default=None)
    p.set_defaults(func=cmd_k_sweep)

    p = with_manifest(sub.add_parser("data-efficiency", parents=[common], help="refit on validation subsets"))
    p.add_argument("--method", default=None, help="comma-separated; default ts,ts+dac")
    p.add_argument("--fractions", default="0.1,0.2,0.5,1.0")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--splits", default=None)
    p.set_defaults(func=cmd_data_efficiency)

    p = sub.add_parser("report-layers", parents=[common], help="layer weight shares of a DAC model")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_report_layers)
    return parser


def main(argv=None) -> int:
    level = logging.getLevelName(os.environ.get("DAC_LOG", "WARNING").upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.bins < 1:
        parser.error("--bins must be >= 1")
    started = time.time()
    set_threads(args.threads)
    try:
        code = args.func(args) or 0
    except DacError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    _write_meta(Path(args.out), args, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
