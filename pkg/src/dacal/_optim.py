"""One-dimensional minimisation used for temperature-style parameters."""
from __future__ import annotations

import math

import numpy as np

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, a: float, b: float, tol: float = 1e-6, max_iter: int = 500) -> float:
    """Minimise a unimodal ``f`` on ``[a, b]`` until the bracket is narrower than ``tol``."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def bracketed_golden(f, a: float, b: float, tol: float = 1e-6, n_grid: int = 61) -> float:
    """Golden-section search around the best point of a coarse grid.

    The grid guards against objectives that are only locally unimodal. The
    returned point is never worse than the best grid point.
    """
    grid = np.linspace(a, b, n_grid)
    vals = np.array([f(x) for x in grid])
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, n_grid - 1)]
    x = golden_section(f, lo, hi, tol)
    return x if f(x) <= vals[i] else float(grid[i])
