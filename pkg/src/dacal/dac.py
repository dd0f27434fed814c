"""Density-aware logit rescaling.

Every sample gets its own divisor ``S = w_0 + sum_l w_l * s_l`` built from its
kNN density proxies ``s_l``. Weights are fitted on a labeled validation split
by minimising the summed squared error between one-hot labels and
``softmax(logits / S)`` under ``w_l >= 0`` and ``w_0 >= BIAS_FLOOR``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._optim import bracketed_golden
from .core import CalibrationDataset, check_layer_order, preserve_argmax, softmax_rows
from .errors import ConfigError, ConvergenceWarning, ShapeError
from .knn import DensityMatrix, KnnIndex, density_profile

logger = logging.getLogger(__name__)

BIAS_FLOOR = 1e-6
MAX_ITER = 500
FTOL = 1e-9
GTOL = 1e-7
# initial bias search range, natural-log scale
LOG_BIAS_RANGE = (-3.0, 3.0)


@dataclass(frozen=True)
class FitReport:
    final_loss: float
    initial_loss: float
    iterations: int
    initial_bias: float
    converged: bool
    weight_shares: dict[str, float]
    message: str = ""


@dataclass(frozen=True)
class DacModel:
    layer_names: list[str]
    weights: np.ndarray
    bias: float
    k_per_layer: dict[str, int] = field(default_factory=dict)
    index_checksums: dict[str, str] = field(default_factory=dict)
    fit_report: FitReport | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(self.layer_names):
            raise ShapeError(f"DacModel: {w.shape[0]} weights for {len(self.layer_names)} layers")
        if (w < 0).any() or not np.isfinite(w).all():
            raise ConfigError(f"DacModel: layer weights must be finite and >= 0, got {w}")
        if not self.bias >= BIAS_FLOOR:
            raise ConfigError(f"DacModel: bias must be >= {BIAS_FLOOR}, got {self.bias}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "layer_names", list(self.layer_names))

    @classmethod
    def bias_only(cls, bias: float = 1.0, layer_names=()) -> "DacModel":
        return cls(list(layer_names), np.zeros(len(layer_names)), bias)

    def weight_shares(self) -> dict[str, float]:
        """Bias and layer weights normalised to sum to one."""
        total = self.bias + float(self.weights.sum())
        shares = {"bias": self.bias / total}
        shares.update({n: float(w) / total for n, w in zip(self.layer_names, self.weights)})
        return shares

    def to_json(self) -> dict:
        doc = {
            "layer_names": self.layer_names,
            "weights": [float(w) for w in self.weights],
            "bias": self.bias,
            "k_per_layer": {k: int(v) for k, v in self.k_per_layer.items()},
            "index_checksums": dict(self.index_checksums),
        }
        if self.fit_report is not None:
            doc["fit_report"] = asdict(self.fit_report)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "DacModel":
        report = doc.get("fit_report")
        return cls(
            layer_names=doc["layer_names"],
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=doc["bias"],
            k_per_layer=doc.get("k_per_layer", {}),
            index_checksums=doc.get("index_checksums", {}),
            fit_report=FitReport(**report) if report else None,
        )

    def checksum(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_densities(model: DacModel, densities: DensityMatrix) -> None:
    check_layer_order(model.layer_names, densities.layer_names, "DAC densities")


def scale_factor(model: DacModel, densities: DensityMatrix) -> np.ndarray:
    """Per-sample divisor ``w_0 + densities @ w``."""
    _check_densities(model, densities)
    s = densities.values @ model.weights + model.bias
    # densities are nonnegative, so this only guards against rounding
    return np.maximum(s, BIAS_FLOOR)


def rescale_logits(model: DacModel, logits, densities: DensityMatrix) -> np.ndarray:
    """Divide each logit row by its sample's scale factor (float64 result)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != len(densities):
        raise ShapeError(f"rescale_logits: logits {z.shape} vs {len(densities)} density rows")
    out = z / scale_factor(model, densities)[:, None]
    return preserve_argmax(out, z)


def squared_error(params, logits, onehot, dens, with_grad: bool = True):
    """Summed squared error of ``softmax(logits / S)`` and its gradient.

    ``params`` is ``[w_0, w_1, ..., w_L]``; ``dens`` is ``[N, L]``.
    """
    params = np.asarray(params, dtype=np.float64)
    s = params[0] + dens @ params[1:]
    inv = 1.0 / s
    q = softmax_rows(logits * inv[:, None])
    resid = q - onehot
    loss = float(np.sum(resid * resid))
    if not with_grad:
        return loss
    zbar = np.sum(q * logits, axis=1, keepdims=True)
    d_inv = 2.0 * np.sum(resid * q * (logits - zbar), axis=1)
    d_s = -d_inv * inv * inv
    grad = np.empty_like(params)
    grad[0] = np.sum(d_s)
    grad[1:] = dens.T @ d_s
    return loss, grad


def best_single_scale(logits, onehot) -> float:
    """Squared-error-optimal shared divisor, searched on ``ln S`` in [-3, 3]."""
    empty = np.zeros((logits.shape[0], 0))

    def f(log_s):
        return squared_error(np.array([math.exp(log_s)]), logits, onehot, empty, with_grad=False)

    return math.exp(bracketed_golden(f, *LOG_BIAS_RANGE, tol=1e-7))


def fit_dac(
    val: CalibrationDataset,
    densities: DensityMatrix,
    k_per_layer: dict[str, int] | None = None,
    index_checksums: dict[str, str] | None = None,
) -> tuple[DacModel, FitReport]:
    """Fit layer weights and bias on a labeled validation split.

    ``densities`` must come from indices built on the training split. The
    search starts from the best bias-only model, so the returned loss never
    exceeds the loss of that model. Non-convergence is reported through
    ``FitReport.converged``, not raised.
    """
    labels = val.require_labels()
    if len(val) < 2:
        raise ConfigError(f"fit_dac: need at least 2 validation samples, got {len(val)}")
    if len(densities) != len(val):
        raise ShapeError(f"fit_dac: {len(densities)} density rows for {len(val)} samples")
    logits = val.logits.astype(np.float64)
    onehot = np.eye(val.num_classes)[labels]
    dens = densities.values
    n_layers = dens.shape[1]

    bias0 = best_single_scale(logits, onehot)
    x0 = np.concatenate([[bias0], np.zeros(n_layers)])
    loss0 = squared_error(x0, logits, onehot, dens, with_grad=False)
    bounds = [(BIAS_FLOOR, None)] + [(0.0, None)] * n_layers
    res = minimize(
        squared_error,
        x0,
        args=(logits, onehot, dens),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": MAX_ITER, "ftol": FTOL, "gtol": GTOL},
    )
    x = np.asarray(res.x, dtype=np.float64)
    x[0] = max(x[0], BIAS_FLOOR)
    x[1:] = np.maximum(x[1:], 0.0)
    loss = squared_error(x, logits, onehot, dens, with_grad=False)
    if not loss <= loss0:
        x, loss = x0, loss0
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"fit_dac did not converge: {res.message}", ConvergenceWarning, stacklevel=2)

    names = list(densities.layer_names)
    model = DacModel(
        layer_names=names,
        weights=x[1:],
        bias=float(x[0]),
        k_per_layer=dict(k_per_layer or {}),
        index_checksums=dict(index_checksums or {}),
    )
    report = FitReport(
        final_loss=float(loss),
        initial_loss=float(loss0),
        iterations=int(res.nit),
        initial_bias=float(bias0),
        converged=converged,
        weight_shares=model.weight_shares(),
        message=str(res.message),
    )
    model = DacModel(**{**model.__dict__, "fit_report": report})
    logger.info("fit_dac: loss %.6g -> %.6g in %d iterations", loss0, loss, res.nit)
    return model, report


def apply_dac(model: DacModel, dataset: CalibrationDataset, indices: list[KnnIndex]) -> np.ndarray:
    """Rescaled logits for ``dataset``, ready for a downstream calibrator."""
    by_name = {ix.layer_name: ix for ix in indices}
    missing = [n for n in model.layer_names if n not in by_name]
    if missing:
        raise ConfigError(f"apply_dac: no index for layer(s) {missing}")
    densities = density_profile(dataset, [by_name[n] for n in model.layer_names])
    return rescale_logits(model, dataset.logits, densities)
