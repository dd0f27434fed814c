"""Post-hoc calibrators that can sit on top of DAC-rescaled logits.

* ``ts``  - temperature scaling (NLL-optimal single temperature)
* ``ets`` - ensemble temperature scaling: simplex mixture of the tempered
  softmax, the raw softmax and the uniform distribution
* ``irm`` - accuracy-preserving multiclass isotonic regression, one monotone
  map shared by all classes
* ``ir``  - one-vs-all isotonic regression, one map per class (may change
  the argmax)
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from ._kernels import pav
from ._optim import golden_section
from .core import as_labels, preserve_argmax, softmax_rows
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

T_MIN, T_MAX = 1e-3, 1e3
IR_FLOOR = 1e-6


def _logits64(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ConfigError(f"expected 2-D logits, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise DataError("logits contain NaN or Inf")
    return z


def _onehot(labels, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[labels]


# ----------------------------------------------------------------- temperature

@dataclass(frozen=True)
class TempScaler:
    temperature: float

    def __post_init__(self):
        if not T_MIN <= self.temperature <= T_MAX:
            raise ConfigError(f"temperature {self.temperature} outside [{T_MIN}, {T_MAX}]")

    def to_json(self) -> dict:
        return {"kind": "ts", "temperature": self.temperature}


def mean_nll(logits: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    lp = log_softmax(logits / temperature, axis=1)
    return float(-lp[np.arange(len(labels)), labels].mean())


def fit_ts(logits, labels) -> TempScaler:
    """Temperature minimising the mean NLL, searched on ``ln T``.

    NLL is convex in ``1/T``, hence unimodal in ``ln T``; golden-section
    search runs until the bracket on ``ln T`` is narrower than 1e-6.
    """
    z = _logits64(logits)
    y = as_labels(labels, z.shape[1], z.shape[0])
    if z.shape[0] < 2:
        raise ConfigError("fit_ts needs at least 2 samples")
    log_t = golden_section(lambda lt: mean_nll(z, y, math.exp(lt)), math.log(T_MIN), math.log(T_MAX), tol=1e-6)
    return TempScaler(float(min(max(math.exp(log_t), T_MIN), T_MAX)))


def apply_ts(model: TempScaler, logits) -> np.ndarray:
    z = _logits64(logits)
    return preserve_argmax(softmax_rows(z / model.temperature), z)


# ------------------------------------------------------------ ensemble TS

@dataclass(frozen=True)
class EtsModel:
    temperature: float
    mix_weights: tuple[float, float, float]

    def __post_init__(self):
        w = np.asarray(self.mix_weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-8:
            raise ConfigError(f"ETS mix weights must lie on the simplex, got {self.mix_weights}")
        object.__setattr__(self, "mix_weights", tuple(float(v) for v in w))

    def to_json(self) -> dict:
        return {"kind": "ets", "temperature": self.temperature, "mix_weights": list(self.mix_weights)}


def _ets_components(z: np.ndarray, temperature: float) -> list[np.ndarray]:
    c = z.shape[1]
    return [softmax_rows(z / temperature), softmax_rows(z), np.full(z.shape, 1.0 / c)]


def _simplex_qp(gram: np.ndarray, lin: np.ndarray) -> np.ndarray:
    """Exact minimiser of ``w.G.w - 2 b.w`` over the probability simplex.

    Enumerates every face of the simplex (vertices first, the pure-TS corner
    leading), solves the equality-constrained problem on each via its KKT
    system, and keeps the best feasible point. Ties keep the earlier face.
    """
    d = len(lin)
    faces = [s for r in range(1, d + 1) for s in itertools.combinations(range(d), r)]
    best_w, best_f = None, math.inf
    for face in faces:
        idx = list(face)
        r = len(idx)
        kkt = np.zeros((r + 1, r + 1))
        kkt[:r, :r] = gram[np.ix_(idx, idx)]
        kkt[:r, r] = kkt[r, :r] = 1.0
        rhs = np.concatenate([lin[idx], [1.0]])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:r]
        if sol.min() < 0.0 or sol.sum() <= 0.0:
            continue
        w = np.zeros(d)
        w[idx] = sol / sol.sum()
        f = float(w @ gram @ w - 2.0 * lin @ w)
        if f < best_f:
            best_w, best_f = w, f
    return best_w


def fit_ets(logits, labels) -> EtsModel:
    """Fit the temperature by NLL, then the mixture weights by squared error.

    The weight problem is a 3-variable quadratic on the simplex and is solved
    exactly. The pure-TS corner ``(1, 0, 0)`` is a candidate, so the result is
    never worse than TS on this objective.
    """
    z = _logits64(logits)
    y = as_labels(labels, z.shape[1], z.shape[0])
    ts = fit_ts(z, y)
    comps = _ets_components(z, ts.temperature)
    target = _onehot(y, z.shape[1])
    a = np.stack([p.ravel() for p in comps], axis=1)
    w = _simplex_qp(a.T @ a, a.T @ target.ravel())
    return EtsModel(ts.temperature, tuple(w))


def apply_ets(model: EtsModel, logits) -> np.ndarray:
    z = _logits64(logits)
    comps = _ets_components(z, model.temperature)
    out = sum(w * p for w, p in zip(model.mix_weights, comps))
    return preserve_argmax(out, z)


# ------------------------------------------------------------ isotonic maps

@dataclass(frozen=True)
class IsotonicMap:
    """Non-decreasing step function on [0, 1].

    Evaluated as the value of the nearest breakpoint at or below the query;
    queries below the first breakpoint take the first value.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.breakpoints, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if x.ndim != 1 or x.shape != v.shape or x.size == 0:
            raise ConfigError("IsotonicMap: breakpoints and values must be equal-length 1-D arrays")
        if np.any(np.diff(x) <= 0):
            raise ConfigError("IsotonicMap: breakpoints must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise ConfigError("IsotonicMap: values must be non-decreasing")
        object.__setattr__(self, "breakpoints", x)
        object.__setattr__(self, "values", v)

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        idx = np.searchsorted(self.breakpoints, p, side="right") - 1
        return self.values[np.clip(idx, 0, len(self.values) - 1)]

    def to_json(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, doc) -> "IsotonicMap":
        return cls(np.asarray(doc["breakpoints"]), np.asarray(doc["values"]))


def fit_isotonic(x, y) -> IsotonicMap:
    """Least-squares monotone fit of ``y`` against ``x``.

    Tied ``x`` values are merged first (their targets averaged, weighted by
    multiplicity), then PAV runs on the distinct, sorted ``x``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0:
        raise ConfigError("isotonic fit on empty input")
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    ux, start, counts = np.unique(xs, return_index=True, return_counts=True)
    sums = np.add.reduceat(ys, start)
    fitted = pav(sums / counts, counts.astype(np.float64))
    return IsotonicMap(ux, fitted)


def _clamp_renormalize(vals: np.ndarray) -> np.ndarray:
    vals = np.clip(vals, IR_FLOOR, 1.0)
    return vals / vals.sum(axis=1, keepdims=True)


def fit_irm(probs, labels) -> IsotonicMap:
    """One monotone map fitted on all (probability, indicator) pairs pooled."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ConfigError("fit_irm: empty or non-2-D probabilities")
    y = as_labels(labels, p.shape[1], p.shape[0])
    return fit_isotonic(p.ravel(), _onehot(y, p.shape[1]).ravel())


def apply_irm(model: IsotonicMap, probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return preserve_argmax(_clamp_renormalize(model(p)), p)


@dataclass(frozen=True)
class OvaIsotonic:
    maps: tuple[IsotonicMap, ...]

    def to_json(self) -> dict:
        return {"kind": "ir", "maps": [m.to_json() for m in self.maps]}


def fit_ir(probs, labels) -> OvaIsotonic:
    """Per-class isotonic maps, class probability against class indicator."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.size == 0:
        raise ConfigError("fit_ir: empty or non-2-D probabilities")
    y = as_labels(labels, p.shape[1], p.shape[0])
    return OvaIsotonic(tuple(fit_isotonic(p[:, c], y == c) for c in range(p.shape[1])))


def apply_ir(model: OvaIsotonic, probs) -> np.ndarray:
    """Apply per-class maps and renormalize. Not accuracy-preserving."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[1] != len(model.maps):
        raise ConfigError(f"apply_ir: {p.shape[1]} columns for {len(model.maps)} class maps")
    vals = np.stack([m(p[:, c]) for c, m in enumerate(model.maps)], axis=1)
    return _clamp_renormalize(vals)
