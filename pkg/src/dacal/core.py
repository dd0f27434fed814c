"""Data model and array primitives shared by every other module.

Matrices are plain ``numpy.ndarray`` objects. On disk and at module
boundaries they are float32; reductions (norms, means, losses) run in float64.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float32 array and reject non-finite entries."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise DataError(f"{name}: contains NaN or Inf")
    return arr


def as_labels(y, num_classes: int, n: int | None = None) -> np.ndarray:
    """Validate an integer label vector against ``num_classes``."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"labels: expected 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.isfinite(y)) or np.any(y != np.round(y)):
            raise DataError("labels: non-integer entries")
    y = y.astype(np.int64)
    if n is not None and y.shape[0] != n:
        raise ShapeError(f"labels: length {y.shape[0]} != {n} rows")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DataError(f"labels: values must lie in [0, {num_classes})")
    return y


def spatial_average(features, channels: int, spatial: int) -> np.ndarray:
    """Average a flattened ``[N, C*S]`` activation over its spatial axis.

    Columns are laid out channel-major: column ``c*S + s``.
    """
    x = np.asarray(features)
    if x.ndim != 2 or spatial < 1 or channels < 0 or x.shape[1] != channels * spatial:
        raise ShapeError(
            f"spatial_average: {x.shape} incompatible with C={channels}, S={spatial}"
        )
    if spatial == 1:
        return x.astype(np.float32, copy=True)
    out = x.reshape(x.shape[0], channels, spatial).astype(np.float64).mean(axis=2)
    return out.astype(np.float32)


def l2_normalize_rows(features) -> np.ndarray:
    """Scale every row to unit euclidean norm.

    All-zero rows are passed through unchanged and reported with a warning.
    """
    x = np.asarray(features, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-D, got {x.shape}")
    x64 = x.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x64, x64))
    zero = norms == 0.0
    if zero.any():
        logger.warning("l2_normalize_rows: %d all-zero row(s) left unnormalized", int(zero.sum()))
    norms[zero] = 1.0
    return (x64 / norms[:, None]).astype(np.float32)


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax in float64 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {z.shape}")
    if z.shape[1] == 0:
        return z.copy()
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def preserve_argmax(out: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Re-impose the argmax of ``ref`` on ``out`` where rounding created a tie.

    Only meaningful for order-preserving maps: there ``out[i, ref_argmax]`` is
    already a (tied) row maximum, so it is nudged up by one ulp. Rows whose
    argmax already agrees are untouched. Modifies ``out`` in place.
    """
    if out.size == 0:
        return out
    want = ref.argmax(axis=1)
    got = out.argmax(axis=1)
    bad = np.nonzero(want != got)[0]
    if bad.size:
        top = out[bad, got[bad]]
        out[bad, want[bad]] = np.nextafter(top, np.inf)
    return out


@dataclass(frozen=True)
class CalibrationDataset:
    """Labels, logits and named per-layer embeddings for one split.

    ``labels`` is ``None`` for unlabeled (e.g. OOD) splits. ``meta`` carries
    free-form split attributes such as ``severity`` or ``kind``.
    """

    split_name: str
    logits: np.ndarray
    layers: dict[str, np.ndarray]
    num_classes: int
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        logits = as_matrix(self.logits, f"{self.split_name}/logits")
        n, c = logits.shape
        if c != self.num_classes:
            raise ShapeError(
                f"{self.split_name}: logits have {c} columns, num_classes={self.num_classes}"
            )
        layers = {}
        for name, feats in self.layers.items():
            feats = as_matrix(feats, f"{self.split_name}/{name}")
            if feats.shape[0] != n:
                raise ShapeError(
                    f"{self.split_name}: layer {name!r} has {feats.shape[0]} rows, expected {n}"
                )
            layers[name] = feats
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "layers", layers)
        if self.labels is not None:
            object.__setattr__(self, "labels", as_labels(self.labels, self.num_classes, n))

    def __len__(self) -> int:
        return self.logits.shape[0]

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    def subset(self, rows) -> "CalibrationDataset":
        rows = np.asarray(rows)
        return CalibrationDataset(
            split_name=self.split_name,
            logits=self.logits[rows],
            layers={k: v[rows] for k, v in self.layers.items()},
            num_classes=self.num_classes,
            labels=None if self.labels is None else self.labels[rows],
            meta=dict(self.meta),
        )

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ConfigError(f"split {self.split_name!r} has no labels")
        return self.labels


def check_layer_order(expected: list[str], got: list[str], what: str = "layers") -> None:
    if list(expected) != list(got):
        raise ConfigError(f"{what}: layer names {list(got)} do not match {list(expected)}")
