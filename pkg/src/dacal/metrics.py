"""Calibration and OOD-detection metrics.

Binning convention: equal-width bin ``m`` (1-based) is ``((m-1)/M, m/M]``
with confidence 0 placed in the first bin. Edges are computed as ``i / M``
in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .core import as_labels
from .errors import ConfigError

DEFAULT_BINS = 15
NLL_FLOOR = 1e-12


@dataclass(frozen=True)
class BinStats:
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n(self) -> int:
        return int(self.count.sum())

    def ece(self) -> float:
        gap = np.abs(self.accuracy - self.confidence)
        return float(np.sum(self.count * gap) / max(self.n, 1))

    def rows(self) -> list[dict]:
        """CSV-ready records: bin, lower, upper, conf, acc, count."""
        return [
            {
                "bin": i + 1,
                "lower": float(self.lower[i]),
                "upper": float(self.upper[i]),
                "conf": float(self.confidence[i]),
                "acc": float(self.accuracy[i]),
                "count": int(self.count[i]),
            }
            for i in range(len(self.count))
        ]


def _probs_labels(probs, labels):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ConfigError("metrics: need a nonempty 2-D probability matrix")
    y = as_labels(labels, p.shape[1], p.shape[0])
    return p, y


def _width_bins(conf: np.ndarray, hit: np.ndarray, n_bins: int) -> BinStats:
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges[1:], conf, side="left"), 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    csum = np.bincount(idx, weights=conf, minlength=n_bins)
    hsum = np.bincount(idx, weights=hit, minlength=n_bins)
    safe = np.maximum(count, 1)
    return BinStats(edges[:-1], edges[1:], count, csum / safe, hsum / safe)


def _mass_bins(conf: np.ndarray, hit: np.ndarray, n_bins: int) -> BinStats:
    n = conf.shape[0]
    if n < n_bins:
        raise ConfigError(f"equal-mass binning needs N >= bins ({n} < {n_bins})")
    order = np.argsort(conf, kind="stable")
    c, h = conf[order], hit[order]
    big, extra = divmod(n, n_bins)
    sizes = np.full(n_bins, big)
    sizes[:extra] += 1
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    lo, hi, cnt, cm, am = [], [], [], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        lo.append(c[a])
        hi.append(c[b - 1])
        cnt.append(b - a)
        cm.append(c[a:b].mean())
        am.append(h[a:b].mean())
    return BinStats(np.array(lo), np.array(hi), np.array(cnt), np.array(cm), np.array(am))


def _confidence_hits(probs, labels):
    p, y = _probs_labels(probs, labels)
    conf = p.max(axis=1)
    hit = (p.argmax(axis=1) == y).astype(np.float64)
    return conf, hit


def reliability_data(probs, labels, n_bins: int = DEFAULT_BINS, scheme: str = "equal-width") -> BinStats:
    conf, hit = _confidence_hits(probs, labels)
    if scheme == "equal-width":
        return _width_bins(conf, hit, n_bins)
    if scheme == "equal-mass":
        return _mass_bins(conf, hit, n_bins)
    raise ConfigError(f"unknown binning scheme {scheme!r}")


def ece_equal_width(probs, labels, n_bins: int = DEFAULT_BINS) -> tuple[float, BinStats]:
    stats = reliability_data(probs, labels, n_bins, "equal-width")
    return stats.ece(), stats


def ece_equal_mass(probs, labels, n_bins: int = DEFAULT_BINS) -> tuple[float, BinStats]:
    stats = reliability_data(probs, labels, n_bins, "equal-mass")
    return stats.ece(), stats


def classwise_ece(probs, labels, n_bins: int = DEFAULT_BINS) -> tuple[float, np.ndarray]:
    """Sum over classes of the equal-width ECE of each class column.

    Per-class values are returned as well, so the mean convention is
    ``per_class.mean()``.
    """
    p, y = _probs_labels(probs, labels)
    per_class = np.array(
        [_width_bins(p[:, c], (y == c).astype(np.float64), n_bins).ece() for c in range(p.shape[1])]
    )
    return float(per_class.sum()), per_class


def brier(probs, labels) -> float:
    p, y = _probs_labels(probs, labels)
    resid = p.copy()
    resid[np.arange(len(y)), y] -= 1.0
    return float(np.mean(np.sum(resid * resid, axis=1)))


def nll(probs, labels) -> float:
    p, y = _probs_labels(probs, labels)
    return float(np.mean(-np.log(np.maximum(p[np.arange(len(y)), y], NLL_FLOOR))))


def accuracy(probs, labels) -> float:
    p, y = _probs_labels(probs, labels)
    return float(np.mean(p.argmax(axis=1) == y))


def macro_average(values) -> float:
    """Unweighted mean over evaluation conditions."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ConfigError("macro_average of no conditions")
    return float(v.mean())


# ------------------------------------------------------------------------ OOD

@dataclass(frozen=True)
class OodScores:
    """Top-class confidences; in-domain is the positive class."""

    in_scores: np.ndarray
    out_scores: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.in_scores, dtype=np.float64).ravel()
        b = np.asarray(self.out_scores, dtype=np.float64).ravel()
        if a.size == 0 or b.size == 0:
            raise ConfigError("OOD metrics need nonempty in- and out-of-domain scores")
        object.__setattr__(self, "in_scores", a)
        object.__setattr__(self, "out_scores", b)

    @classmethod
    def from_probs(cls, in_probs, out_probs) -> "OodScores":
        return cls(np.asarray(in_probs).max(axis=1), np.asarray(out_probs).max(axis=1))


def _threshold_counts(pos: np.ndarray, neg: np.ndarray):
    """Distinct thresholds (descending) with counts of scores >= threshold."""
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    tp = pos.size - np.searchsorted(pos_s, thr, side="left")
    fp = neg.size - np.searchsorted(neg_s, thr, side="left")
    return thr, tp, fp


def fpr_at_tpr(scores: OodScores, tpr_target: float = 0.95) -> float:
    """OOD false-positive rate at the first descending threshold with TPR >= target."""
    _, tp, fp = _threshold_counts(scores.in_scores, scores.out_scores)
    tpr = tp / scores.in_scores.size
    i = int(np.argmax(tpr >= tpr_target))
    return float(fp[i] / scores.out_scores.size)


def detection_error(scores: OodScores) -> float:
    """min over thresholds of 0.5 * (1 - TPR) + 0.5 * FPR, including reject-all."""
    _, tp, fp = _threshold_counts(scores.in_scores, scores.out_scores)
    err = 0.5 * (1.0 - tp / scores.in_scores.size) + 0.5 * (fp / scores.out_scores.size)
    return float(min(err.min(), 0.5))


def auroc(scores: OodScores) -> float:
    """P(in > out) + 0.5 P(in == out) via the Mann-Whitney rank sum."""
    n_in, n_out = scores.in_scores.size, scores.out_scores.size
    ranks = rankdata(np.concatenate([scores.in_scores, scores.out_scores]))
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_out))


def _average_precision(pos: np.ndarray, neg: np.ndarray) -> float:
    _, tp, fp = _threshold_counts(pos, neg)
    prev = np.concatenate([[0], tp[:-1]])
    terms = (tp - prev) / pos.size * (tp / (tp + fp))
    return math.fsum(terms.tolist())


def aupr(scores: OodScores, positive: str = "in") -> float:
    """Step-wise area under the precision-recall curve, no interpolation.

    ``positive="in"``: in-domain positive, higher score positive.
    ``positive="out"``: OOD positive, scores negated.
    """
    if positive == "in":
        return _average_precision(scores.in_scores, scores.out_scores)
    if positive == "out":
        return _average_precision(-scores.out_scores, -scores.in_scores)
    raise ConfigError(f"positive must be 'in' or 'out', got {positive!r}")


def ood_report(scores: OodScores) -> dict[str, float]:
    return {
        "fpr_at_95_tpr": fpr_at_tpr(scores, 0.95),
        "detection_error": detection_error(scores),
        "auroc": auroc(scores),
        "aupr_in": aupr(scores, "in"),
        "aupr_out": aupr(scores, "out"),
    }


def quartiles(x) -> dict[str, float]:
    q = np.quantile(np.asarray(x, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(["min", "q1", "median", "q3", "max"], map(float, q)))


METRICS = {
    "ece": lambda p, y, bins: ece_equal_width(p, y, bins)[0],
    "ece_mass": lambda p, y, bins: ece_equal_mass(p, y, bins)[0],
    "classwise_ece": lambda p, y, bins: classwise_ece(p, y, bins)[0],
    "brier": lambda p, y, bins: brier(p, y),
    "nll": lambda p, y, bins: nll(p, y),
    "accuracy": lambda p, y, bins: accuracy(p, y),
}
