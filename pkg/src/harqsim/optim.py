"""Small vectorized 1-D search primitives shared by the solvers.

All routines operate elementwise on arrays so whole batches of independent
problems (quadrature nodes, grid gains, candidate pairs) are solved in one
pass.  Scalars ride along as 0-d arrays.
"""
from __future__ import annotations

import numpy as np

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0       # 0.618...
_INVPHI2 = (3.0 - np.sqrt(5.0)) / 2.0      # 0.382...


def golden_min(f, lo, hi, iters: int = 120, rel_tol: float = 1e-9):
    """Golden-section minimum of f on [lo, hi], elementwise.

    f must accept and return arrays of the bracket's shape.  Unimodality on
    the bracket is the caller's responsibility.  Returns (x, f(x)).
    """
    if np.ndim(lo) == 0 and np.ndim(hi) == 0:
        return _golden_min_scalar(f, float(lo), float(hi), iters, rel_tol)
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    h = hi - lo
    c = lo + _INVPHI2 * h
    d = lo + _INVPHI * h
    fc = np.asarray(f(c), dtype=float)
    fd = np.asarray(f(d), dtype=float)
    for _ in range(iters):
        scale = np.maximum(np.abs(lo), np.abs(hi)) + 1e-300
        if np.all(h <= rel_tol * scale):
            break
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        h = hi - lo
        x_new = np.where(left, lo + _INVPHI2 * h, lo + _INVPHI * h)
        f_new = np.asarray(f(x_new), dtype=float)
        c, d = np.where(left, x_new, d), np.where(left, c, x_new)
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
    take_c = fc <= fd
    x = np.where(take_c, c, d)
    fx = np.where(take_c, fc, fd)
    if x.ndim == 0:
        return float(x), float(fx)
    return x, fx


def _golden_min_scalar(f, lo: float, hi: float, iters: int, rel_tol: float):
    # same update sequence as the array path, on plain floats
    h = hi - lo
    c = lo + _INVPHI2 * h
    d = lo + _INVPHI * h
    fc = float(f(c))
    fd = float(f(d))
    for _ in range(iters):
        if h <= rel_tol * (max(abs(lo), abs(hi)) + 1e-300):
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            h = hi - lo
            c = lo + _INVPHI2 * h
            fc = float(f(c))
        else:
            lo, c, fc = c, d, fd
            h = hi - lo
            d = lo + _INVPHI * h
            fd = float(f(d))
    return (c, fc) if fc <= fd else (d, fd)


def bisect_root(f, lo, hi, iters: int = 200, rel_tol: float = 1e-12):
    """Elementwise bisection for f(x) = 0 on brackets [lo, hi].

    Assumes f(lo) and f(hi) have opposite signs where the bracket is valid;
    entries with an empty bracket (lo == hi) pass through unchanged.
    """
    if np.ndim(lo) == 0 and np.ndim(hi) == 0:
        return _bisect_root_scalar(f, float(lo), float(hi), iters, rel_tol)
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    flo = np.asarray(f(lo), dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        width = hi - lo
        scale = np.maximum(np.abs(lo), np.abs(hi)) + 1e-300
        if np.all(width <= rel_tol * scale):
            break
        fmid = np.asarray(f(mid), dtype=float)
        same_side = (fmid > 0) == (flo > 0)
        lo = np.where(same_side, mid, lo)
        flo = np.where(same_side, fmid, flo)
        hi = np.where(same_side, hi, mid)
    mid = 0.5 * (lo + hi)
    if mid.ndim == 0:
        return float(mid)
    return mid


def _bisect_root_scalar(f, lo: float, hi: float, iters: int, rel_tol: float):
    flo = float(f(lo))
    for _ in range(iters):
        if hi - lo <= rel_tol * (max(abs(lo), abs(hi)) + 1e-300):
            break
        mid = 0.5 * (lo + hi)
        fmid = float(f(mid))
        if (fmid > 0) == (flo > 0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)
