"""Nearest-neighbour kernels behind every Chamfer evaluation.

Two interchangeable implementations exist: numba-compiled loops and a
vectorised numpy path.  ``_accel.HAVE_NUMBA`` (driven by the
``LINSHAPE_DISABLE_NUMBA`` env flag) picks the default.  Both compute the
squared distance as ``dx*dx + dy*dy + dz*dz`` in float64 and break ties by
the lowest index, so they agree bitwise.
"""
from __future__ import annotations

import functools

import numpy as np

from . import _accel

# Larger pairs are processed row-block by row-block in the numpy path.
_NUMPY_BLOCK = 1 << 20


def _sqdist_matrix(a, b):
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    dz = a[:, None, 2] - b[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _pair_nn_numpy(a, b):
    m1, m2 = len(a), len(b)
    da = np.empty(m1)
    ia = np.empty(m1, dtype=np.int64)
    db = np.full(m2, np.inf)
    ib = np.zeros(m2, dtype=np.int64)
    rows = max(1, _NUMPY_BLOCK // max(m2, 1))
    for s in range(0, m1, rows):
        d = _sqdist_matrix(a[s:s + rows], b)
        ia[s:s + rows] = np.argmin(d, axis=1)
        da[s:s + rows] = d[np.arange(len(d)), ia[s:s + rows]]
        j = np.argmin(d, axis=0)
        col = d[j, np.arange(m2)]
        better = col < db
        db[better] = col[better]
        ib[better] = j[better] + s
    return da, ia, db, ib


def batch_nn_numpy(A, B):
    """Pure numpy nearest neighbours for ``P`` cloud pairs.

    Returns ``(da, ia, db, ib)`` where ``da[p, i]`` is the squared distance
    from ``A[p, i]`` to its nearest point ``B[p, ia[p, i]]`` and symmetrically
    for ``db``/``ib``.
    """
    P, m1, _ = A.shape
    m2 = B.shape[1]
    da = np.empty((P, m1))
    ia = np.empty((P, m1), dtype=np.int64)
    db = np.empty((P, m2))
    ib = np.empty((P, m2), dtype=np.int64)
    for p in range(P):
        da[p], ia[p], db[p], ib[p] = _pair_nn_numpy(A[p], B[p])
    return da, ia, db, ib


def batch_nn_labeled_numpy(A, la, B, lb):
    """Like :func:`batch_nn_numpy` but only same-label points can match.

    Points without any same-label partner get ``inf`` and index ``-1``.
    """
    P, m1, _ = A.shape
    m2 = B.shape[1]
    da = np.full((P, m1), np.inf)
    ia = np.full((P, m1), -1, dtype=np.int64)
    db = np.full((P, m2), np.inf)
    ib = np.full((P, m2), -1, dtype=np.int64)
    for p in range(P):
        for lab in np.union1d(la[p], lb[p]):
            sa = np.flatnonzero(la[p] == lab)
            sb = np.flatnonzero(lb[p] == lab)
            if len(sa) == 0 or len(sb) == 0:
                continue
            d1, i1, d2, i2 = _pair_nn_numpy(A[p, sa], B[p, sb])
            da[p, sa] = d1
            ia[p, sa] = sb[i1]
            db[p, sb] = d2
            ib[p, sb] = sa[i2]
    return da, ia, db, ib


@functools.lru_cache(maxsize=None)
def numba_kernels():
    """Compile (once) and return the numba kernels as a dict.

    Raises ImportError when numba is unavailable.  Independent of the env
    flag so the benchmark can compare both paths.
    """
    import numba

    @numba.njit(cache=True, nogil=True)
    def batch_nn(A, B):
        P, m1 = A.shape[0], A.shape[1]
        m2 = B.shape[1]
        da = np.empty((P, m1))
        ia = np.empty((P, m1), dtype=np.int64)
        db = np.empty((P, m2))
        ib = np.empty((P, m2), dtype=np.int64)
        for p in range(P):
            for j in range(m2):
                db[p, j] = np.inf
                ib[p, j] = 0
            for i in range(m1):
                ax = A[p, i, 0]
                ay = A[p, i, 1]
                az = A[p, i, 2]
                best = np.inf
                bi = 0
                for j in range(m2):
                    dx = ax - B[p, j, 0]
                    dy = ay - B[p, j, 1]
                    dz = az - B[p, j, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < best:
                        best = d
                        bi = j
                    if d < db[p, j]:
                        db[p, j] = d
                        ib[p, j] = i
                da[p, i] = best
                ia[p, i] = bi
        return da, ia, db, ib

    @numba.njit(cache=True, nogil=True)
    def batch_nn_labeled(A, la, B, lb):
        P, m1 = A.shape[0], A.shape[1]
        m2 = B.shape[1]
        da = np.empty((P, m1))
        ia = np.empty((P, m1), dtype=np.int64)
        db = np.empty((P, m2))
        ib = np.empty((P, m2), dtype=np.int64)
        for p in range(P):
            for j in range(m2):
                db[p, j] = np.inf
                ib[p, j] = -1
            for i in range(m1):
                ax = A[p, i, 0]
                ay = A[p, i, 1]
                az = A[p, i, 2]
                lab = la[p, i]
                best = np.inf
                bi = -1
                for j in range(m2):
                    if lb[p, j] != lab:
                        continue
                    dx = ax - B[p, j, 0]
                    dy = ay - B[p, j, 1]
                    dz = az - B[p, j, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < best:
                        best = d
                        bi = j
                    if d < db[p, j]:
                        db[p, j] = d
                        ib[p, j] = i
                da[p, i] = best
                ia[p, i] = bi
        return da, ia, db, ib

    return {"batch_nn": batch_nn, "batch_nn_labeled": batch_nn_labeled}


def _prep(A, B):
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    if B.ndim == 2:
        B = B[None]
    return A, B


def batch_nn(A, B):
    """Nearest neighbours for cloud pairs ``A[p]``/``B[p]`` (default backend)."""
    A, B = _prep(A, B)
    if _accel.HAVE_NUMBA:
        return numba_kernels()["batch_nn"](A, B)
    return batch_nn_numpy(A, B)


def batch_nn_labeled(A, la, B, lb):
    A, B = _prep(A, B)
    la = np.ascontiguousarray(la, dtype=np.int64).reshape(A.shape[:2])
    lb = np.ascontiguousarray(lb, dtype=np.int64).reshape(B.shape[:2])
    if _accel.HAVE_NUMBA:
        return numba_kernels()["batch_nn_labeled"](A, la, B, lb)
    return batch_nn_labeled_numpy(A, la, B, lb)
