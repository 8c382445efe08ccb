"""Deterministic O(N^2) mean-field drift summation.

The per-particle sum over interaction partners uses a fixed reduction tree
(sequential blocks of 128 terms, then pairwise combination of the block sums,
the same scheme numpy's pairwise summation uses), so results are bit-identical
no matter how many threads execute the outer loop. Parallelism is over the
target particle index only; each row owns its output.

Power-law kernels in d=1 and d=2 have specialized branch-light inner loops;
other dimensions fall back to a generic loop. The sign kernel (alpha == 1,
d == 1, radial) additionally has an exact O(N log N) rank shortcut used by the
stepping loop.
"""

from __future__ import annotations

import os

import numba

# prefer omp/workqueue; the sandbox TBB is too old and only emits a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

import numpy as np
from numba import njit, prange

_BLOCK = 128


def apply_thread_cap() -> int:
    """Honor the MVLOV_THREADS env var (speed only, never results)."""
    cap = os.environ.get("MVLOV_THREADS", "")
    n_avail = numba.config.NUMBA_NUM_THREADS
    if cap.strip():
        n = max(1, min(int(cap), n_avail))
    else:
        n = n_avail
    numba.set_num_threads(n)
    return n


@njit(cache=True)
def _tree_combine(buf: np.ndarray, m: int) -> float:
    # pairwise tree over buf[:m]; buf is scratch and gets overwritten
    while m > 1:
        half = m // 2
        for k in range(half):
            buf[k] = buf[2 * k] + buf[2 * k + 1]
        if m & 1:
            buf[half] = buf[m - 1]
            m = half + 1
        else:
            m = half
    return buf[0]


@njit(cache=True)
def _weight(r2: float, c: float, alpha: float) -> float:
    # c * r^(-alpha) written without pow for the common exponents
    if r2 <= 0.0:
        return 0.0
    if alpha == 1.0:
        return c / np.sqrt(r2)
    if alpha == 1.5:
        return c * np.sqrt(np.sqrt(r2)) / r2
    return c * r2 ** (-0.5 * alpha)


@njit(cache=True)
def _row_d1(x: np.ndarray, i: int, c: float, alpha: float, trunc: float) -> float:
    n = x.shape[0]
    nblk = (n + _BLOCK - 1) // _BLOCK
    bs = np.empty(nblk)
    xi = x[i, 0]
    for blk in range(nblk):
        s = 0.0
        jend = min((blk + 1) * _BLOCK, n)
        for j in range(blk * _BLOCK, jend):
            dx = xi - x[j, 0]
            v = _weight(dx * dx, c, alpha) * dx
            if trunc > 0.0:
                v = min(max(v, -trunc), trunc)
            s += v
        bs[blk] = s
    return _tree_combine(bs, nblk)


@njit(cache=True)
def _row_d2(x: np.ndarray, i: int, c: float, alpha: float, trunc: float,
            rot: bool, out: np.ndarray) -> None:
    n = x.shape[0]
    nblk = (n + _BLOCK - 1) // _BLOCK
    bs0 = np.empty(nblk)
    bs1 = np.empty(nblk)
    xi0 = x[i, 0]
    xi1 = x[i, 1]
    for blk in range(nblk):
        s0 = 0.0
        s1 = 0.0
        jend = min((blk + 1) * _BLOCK, n)
        for j in range(blk * _BLOCK, jend):
            dx = xi0 - x[j, 0]
            dy = xi1 - x[j, 1]
            w = _weight(dx * dx + dy * dy, c, alpha)
            if rot:
                v0 = -w * dy
                v1 = w * dx
            else:
                v0 = w * dx
                v1 = w * dy
            if trunc > 0.0:
                v0 = min(max(v0, -trunc), trunc)
                v1 = min(max(v1, -trunc), trunc)
            s0 += v0
            s1 += v1
        bs0[blk] = s0
        bs1[blk] = s1
    out[0] = _tree_combine(bs0, nblk)
    out[1] = _tree_combine(bs1, nblk)


@njit(cache=True)
def _row_nd(x: np.ndarray, i: int, c: float, alpha: float, trunc: float,
            out: np.ndarray) -> None:
    n, d = x.shape
    nblk = (n + _BLOCK - 1) // _BLOCK
    bs = np.empty((d, nblk))
    for blk in range(nblk):
        for k in range(d):
            bs[k, blk] = 0.0
        jend = min((blk + 1) * _BLOCK, n)
        for j in range(blk * _BLOCK, jend):
            r2 = 0.0
            for k in range(d):
                dk = x[i, k] - x[j, k]
                r2 += dk * dk
            w = _weight(r2, c, alpha)
            for k in range(d):
                v = w * (x[i, k] - x[j, k])
                if trunc > 0.0:
                    v = min(max(v, -trunc), trunc)
                bs[k, blk] += v
    for k in range(d):
        out[k] = _tree_combine(bs[k], nblk)


@njit(cache=True, parallel=True)
def _all_d1(x: np.ndarray, c: float, alpha: float, trunc: float,
            out: np.ndarray) -> None:
    n = x.shape[0]
    for i in prange(n):
        out[i, 0] = _row_d1(x, i, c, alpha, trunc) / n


@njit(cache=True, parallel=True)
def _all_d2(x: np.ndarray, c: float, alpha: float, trunc: float, rot: bool,
            out: np.ndarray) -> None:
    n = x.shape[0]
    for i in prange(n):
        loc = np.empty(2)
        _row_d2(x, i, c, alpha, trunc, rot, loc)
        out[i, 0] = loc[0] / n
        out[i, 1] = loc[1] / n


@njit(cache=True, parallel=True)
def _all_nd(x: np.ndarray, c: float, alpha: float, trunc: float,
            out: np.ndarray) -> None:
    n, d = x.shape
    for i in prange(n):
        loc = np.empty(d)
        _row_nd(x, i, c, alpha, trunc, loc)
        for k in range(d):
            out[i, k] = loc[k] / n


def rank_drift_sign_kernel(x: np.ndarray, c_clamped: float) -> np.ndarray:
    """Exact drift for the d=1 sign kernel, O(N log N).

    ``sum_j sign(x_i - x_j)`` equals (#strictly below) - (#strictly above),
    which depends only on ranks; ties (and the self term) contribute zero.
    """
    n = x.shape[0]
    flat = x[:, 0]
    order = np.argsort(flat, kind="stable")
    xs = flat[order]
    below = np.searchsorted(xs, flat, side="left")
    above = n - np.searchsorted(xs, flat, side="right")
    return ((below - above) * c_clamped / n)[:, None]


def tree_sum(terms: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numpy mirror of the fixed block+tree reduction (for callable kernels)."""
    arr = np.moveaxis(np.asarray(terms, dtype=float), axis, 0)
    n = arr.shape[0]
    nblk = (n + _BLOCK - 1) // _BLOCK
    pad = nblk * _BLOCK - n
    if pad:
        arr = np.concatenate([arr, np.zeros((pad,) + arr.shape[1:])], axis=0)
    blocks = arr.reshape((nblk, _BLOCK) + arr.shape[1:])
    sums = blocks[:, 0]
    for j in range(1, _BLOCK):
        sums = sums + blocks[:, j]
    while nblk > 1:
        half = nblk // 2
        out = sums[0:2 * half:2] + sums[1:2 * half:2]
        if nblk & 1:
            out = np.concatenate([out, sums[nblk - 1:nblk]], axis=0)
        sums = out
        nblk = sums.shape[0]
    return sums[0]


def all_drift_power_law(x: np.ndarray, c: float, alpha: float, trunc: float,
                        rotational: bool) -> np.ndarray:
    n, d = x.shape
    out = np.empty((n, d))
    if d == 1:
        _all_d1(x, c, alpha, trunc, out)
    elif d == 2:
        _all_d2(x, c, alpha, trunc, rotational, out)
    else:
        if rotational:
            raise ValueError("rotational kernels are 2-d only")
        _all_nd(x, c, alpha, trunc, out)
    return out


def row_drift_power_law(x: np.ndarray, i: int, c: float, alpha: float,
                        trunc: float, rotational: bool) -> np.ndarray:
    n, d = x.shape
    if d == 1:
        return np.array([_row_d1(x, i, c, alpha, trunc)]) / n
    if d == 2:
        out = np.empty(2)
        _row_d2(x, i, c, alpha, trunc, rotational, out)
        return out / n
    if rotational:
        raise ValueError("rotational kernels are 2-d only")
    out = np.empty(d)
    _row_nd(x, i, c, alpha, trunc, out)
    return out / n
