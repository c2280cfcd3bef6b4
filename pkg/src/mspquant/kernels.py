"""Hot inner loops: nearest-level search and the integer GEMM datapaths.

Each kernel has a numba implementation and a vectorised numpy implementation
with identical results; ``_accel.get_backend()`` picks one at call time.
"""
import numpy as np

from . import _accel
from ._accel import njit

# numpy fallback processes the (N, R, C) shift broadcast in slabs of this many elements
_NUMPY_SLAB = 1 << 22


@njit(cache=True)
def _nearest_index_nb(levels, x, out):
    n = levels.shape[0]
    for i in range(x.shape[0]):
        v = x[i]
        lo = 0
        hi = n
        while lo < hi:
            mid = (lo + hi) >> 1
            if levels[mid] < v:
                lo = mid + 1
            else:
                hi = mid
        if lo == 0:
            out[i] = 0
        elif lo == n:
            out[i] = n - 1
        else:
            a = lo - 1
            da = abs(v - levels[a])
            db = abs(v - levels[lo])
            if da < db:
                out[i] = a
            elif db < da:
                out[i] = lo
            elif abs(levels[a]) <= abs(levels[lo]):
                out[i] = a
            else:
                out[i] = lo


def _nearest_index_np(levels, x):
    n = levels.shape[0]
    hi = np.searchsorted(levels, x, side="left")
    hi_c = np.clip(hi, 1, n - 1)
    lo_c = hi_c - 1
    da = np.abs(x - levels[lo_c])
    db = np.abs(x - levels[hi_c])
    pick_lo = (da < db) | ((da == db) & (np.abs(levels[lo_c]) <= np.abs(levels[hi_c])))
    idx = np.where(pick_lo, lo_c, hi_c)
    idx = np.where(hi == 0, 0, idx)
    idx = np.where(hi == n, n - 1, idx)
    return idx.astype(np.int64)


def nearest_index(levels, x):
    """Index of the level nearest to each ``x``; ties go to the smaller magnitude.

    ``levels`` must be sorted ascending. ``x`` may have any shape.
    """
    levels = np.ascontiguousarray(levels, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x.reshape(-1))
    if levels.shape[0] == 1:
        return np.zeros(x.shape, dtype=np.int64)
    if _accel.get_backend() == "numba":
        out = np.empty(flat.shape[0], dtype=np.int64)
        _nearest_index_nb(levels, flat, out)
    else:
        out = _nearest_index_np(levels, flat)
    return out.reshape(x.shape)


@njit(cache=True)
def _shift_accumulate_nb(A, sh1, sh2, neg, out):
    N, C = A.shape
    R = sh1.shape[0]
    for n in range(N):
        for r in range(R):
            s = 0
            for c in range(C):
                a = A[n, c]
                t = 0
                if sh1[r, c] >= 0:
                    t += a << sh1[r, c]
                if sh2[r, c] >= 0:
                    t += a << sh2[r, c]
                if neg[r, c]:
                    s -= t
                else:
                    s += t
            out[n, r] = s


def _shift_accumulate_np(A, sh1, sh2, neg):
    N, C = A.shape
    R = sh1.shape[0]
    out = np.empty((N, R), dtype=np.int64)
    m1 = sh1 >= 0
    m2 = sh2 >= 0
    s1 = np.where(m1, sh1, 0)
    s2 = np.where(m2, sh2, 0)
    sign = np.where(neg, -1, 1).astype(np.int64)
    step = max(1, _NUMPY_SLAB // max(1, R * C))
    for start in range(0, N, step):
        a = A[start:start + step, None, :]
        t = np.where(m1, a << s1, 0) + np.where(m2, a << s2, 0)
        out[start:start + step] = (t * sign).sum(axis=2)
    return out


def shift_accumulate(A, sh1, sh2, neg):
    """Multiplier-free row accumulation: ``sum_c ±((a << sh1) + (a << sh2))``.

    A negative shift marks an absent term. ``A`` is (N, C) non-negative int64,
    shift/sign tables are (R, C). Returns (N, R) int64.
    """
    A = np.ascontiguousarray(A, dtype=np.int64)
    sh1 = np.ascontiguousarray(sh1, dtype=np.int64)
    sh2 = np.ascontiguousarray(sh2, dtype=np.int64)
    neg = np.ascontiguousarray(neg, dtype=np.bool_)
    if _accel.get_backend() == "numba":
        out = np.empty((A.shape[0], sh1.shape[0]), dtype=np.int64)
        _shift_accumulate_nb(A, sh1, sh2, neg, out)
        return out
    return _shift_accumulate_np(A, sh1, sh2, neg)


@njit(cache=True)
def _int_accumulate_nb(A, K, out):
    N, C = A.shape
    R = K.shape[0]
    for n in range(N):
        for r in range(R):
            s = 0
            for c in range(C):
                s += A[n, c] * K[r, c]
            out[n, r] = s


def int_accumulate(A, K):
    """Integer multiply-accumulate ``A @ K.T`` in int64 (the DSP datapath)."""
    A = np.ascontiguousarray(A, dtype=np.int64)
    K = np.ascontiguousarray(K, dtype=np.int64)
    if _accel.get_backend() == "numba":
        out = np.empty((A.shape[0], K.shape[0]), dtype=np.int64)
        _int_accumulate_nb(A, K, out)
        return out
    # numpy integer matmul is exact (no BLAS)
    return A @ K.T
