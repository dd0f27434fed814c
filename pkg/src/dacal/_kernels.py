"""Hot loops: exact kth-nearest-neighbour distances and pool-adjacent-violators.

Both backends evaluate dot products in float64 with a fixed left-to-right
summation over the feature axis, so numba and numpy results are bitwise
identical. Squared distances are ``|q|^2 + |r|^2 - 2 q.r`` with all three
terms summed the same way; for exactly unit vectors this is ``2 - 2 q.r``,
and a row matched against a bitwise copy of itself gets distance exactly 0
even though float32 normalisation leaves its norm a few ulps off 1.
"""
from __future__ import annotations

import numpy as np

from ._accel import HAS_NUMBA, njit

if HAS_NUMBA:
    from numba import prange
else:
    prange = range

# queries per block in the numpy path; bounds the [block, M] scratch matrix
_BLOCK_ELEMS = 1 << 22


@njit(cache=True)
def _select_kth_largest(a, k):
    """k-th largest value of ``a`` (1-based). Reorders ``a`` in place."""
    lo = 0
    hi = a.shape[0] - 1
    target = k - 1
    while hi > lo:
        mid = (lo + hi) // 2
        # median of three, ordered descending
        if a[mid] > a[lo]:
            a[mid], a[lo] = a[lo], a[mid]
        if a[hi] > a[lo]:
            a[hi], a[lo] = a[lo], a[hi]
        if a[hi] > a[mid]:
            a[hi], a[mid] = a[mid], a[hi]
        pivot = a[mid]
        i = lo
        j = hi
        while i <= j:
            while a[i] > pivot:
                i += 1
            while a[j] < pivot:
                j -= 1
            if i <= j:
                a[i], a[j] = a[j], a[i]
                i += 1
                j -= 1
        if target <= j:
            hi = j
        elif target >= i:
            lo = i
        else:
            return a[target]
    return a[target]


@njit(cache=True)
def _sq_norms(x64):
    out = np.empty(x64.shape[0], dtype=np.float64)
    for j in range(x64.shape[0]):
        acc = 0.0
        for t in range(x64.shape[1]):
            acc += x64[j, t] * x64[j, t]
        out[j] = acc
    return out


@njit(cache=True, parallel=True)
def _kth_distance_numba(ref, queries, k):
    n = queries.shape[0]
    m, d = ref.shape
    ref64 = ref.astype(np.float64)
    ref_sq = _sq_norms(ref64)
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        q = queries[i].astype(np.float64)
        q_sq = 0.0
        for t in range(d):
            q_sq += q[t] * q[t]
        # closeness = 2 q.r - |r|^2 = |q|^2 - dist^2, so select its k-th largest
        close = np.empty(m, dtype=np.float64)
        for j in range(m):
            acc = 0.0
            for t in range(d):
                acc += q[t] * ref64[j, t]
            close[j] = 2.0 * acc - ref_sq[j]
        v = q_sq - _select_kth_largest(close, k)
        out[i] = np.sqrt(v) if v > 0.0 else 0.0
    return out


def _dot_sequential(ref64: np.ndarray, q64: np.ndarray) -> np.ndarray:
    """[n, m] dot products summed over the feature axis in index order."""
    acc = np.zeros((q64.shape[0], ref64.shape[0]), dtype=np.float64)
    for t in range(ref64.shape[1]):
        acc += q64[:, t, None] * ref64[None, :, t]
    return acc


def _sq_norms_numpy(x64: np.ndarray) -> np.ndarray:
    acc = np.zeros(x64.shape[0], dtype=np.float64)
    for t in range(x64.shape[1]):
        acc += x64[:, t] * x64[:, t]
    return acc


def sphere_distances(ref, queries) -> np.ndarray:
    """Full ``[n, m]`` distance matrix using the canonical summation order."""
    ref64 = np.asarray(ref, dtype=np.float32).astype(np.float64)
    q64 = np.asarray(queries, dtype=np.float32).astype(np.float64)
    close = 2.0 * _dot_sequential(ref64, q64) - _sq_norms_numpy(ref64)[None, :]
    return np.sqrt(np.maximum(0.0, _sq_norms_numpy(q64)[:, None] - close))


def _kth_distance_numpy(ref, queries, k):
    n = queries.shape[0]
    m = ref.shape[0]
    out = np.empty(n, dtype=np.float64)
    ref64 = ref.astype(np.float64)
    ref_sq = _sq_norms_numpy(ref64)
    block = max(1, _BLOCK_ELEMS // max(m, 1))
    for lo in range(0, n, block):
        q64 = queries[lo:lo + block].astype(np.float64)
        neg_close = ref_sq[None, :] - 2.0 * _dot_sequential(ref64, q64)
        kth = np.partition(neg_close, k - 1, axis=1)[:, k - 1]
        out[lo:lo + block] = np.sqrt(np.maximum(0.0, _sq_norms_numpy(q64) + kth))
    return out


def kth_distance_kernel(ref: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    ref = np.ascontiguousarray(ref, dtype=np.float32)
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if queries.shape[0] == 0:
        return np.empty(0, dtype=np.float64)
    if HAS_NUMBA:
        return _kth_distance_numba(ref, queries, int(k))
    return _kth_distance_numpy(ref, queries, int(k))


@njit(cache=True)
def _pav(y, w):
    n = y.shape[0]
    sum_wy = np.empty(n, dtype=np.float64)
    sum_w = np.empty(n, dtype=np.float64)
    size = np.empty(n, dtype=np.int64)
    top = 0
    for i in range(n):
        sum_wy[top] = w[i] * y[i]
        sum_w[top] = w[i]
        size[top] = 1
        top += 1
        while top > 1 and sum_wy[top - 2] * sum_w[top - 1] > sum_wy[top - 1] * sum_w[top - 2]:
            sum_wy[top - 2] += sum_wy[top - 1]
            sum_w[top - 2] += sum_w[top - 1]
            size[top - 2] += size[top - 1]
            top -= 1
    out = np.empty(n, dtype=np.float64)
    pos = 0
    for b in range(top):
        v = sum_wy[b] / sum_w[b]
        for _ in range(size[b]):
            out[pos] = v
            pos += 1
    return out


def pav(y, w=None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit of ``y`` (already in x order)."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.ascontiguousarray(w, dtype=np.float64)
    if y.shape != w.shape:
        raise ValueError("pav: y and w must have equal length")
    if y.size == 0:
        return y.copy()
    return _pav(y, w)
