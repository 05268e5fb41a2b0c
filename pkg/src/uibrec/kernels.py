"""Inner-loop kernels with numba and numpy implementations.

Each public function dispatches on :func:`uibrec._accel.use_numba`. Both
paths produce identical results (integer kernels bit-for-bit; float
kernels up to summation order, which is kept the same where possible).
"""
from __future__ import annotations

import numpy as np

from . import _accel

if _accel.HAS_NUMBA:
    from numba import njit
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# -- membership of (user, item) pairs in a CSR interaction matrix ---------


@njit(cache=True)
def _observed_mask_nb(indptr, indices, users, items):
    out = np.zeros(users.shape[0], dtype=np.bool_)
    for k in range(users.shape[0]):
        u = users[k]
        x = items[k]
        lo = indptr[u]
        hi = indptr[u + 1]
        while lo < hi:
            mid = (lo + hi) >> 1
            v = indices[mid]
            if v < x:
                lo = mid + 1
            elif v > x:
                hi = mid
            else:
                out[k] = True
                break
    return out


def pair_keys(indptr: np.ndarray, indices: np.ndarray, n_cols: int) -> np.ndarray:
    """Flattened ``row * n_cols + col`` keys; sorted when CSR rows are sorted."""
    row_of = np.repeat(np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr))
    return row_of * n_cols + indices.astype(np.int64)


def _observed_mask_np(keys, n_cols, users, items):
    q = users * n_cols + items
    if keys.size == 0:
        return np.zeros(q.shape, dtype=bool)
    pos = np.minimum(np.searchsorted(keys, q), keys.size - 1)
    return keys[pos] == q


def observed_mask(indptr: np.ndarray, indices: np.ndarray, n_cols: int,
                  users: np.ndarray, items: np.ndarray,
                  keys: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask: is ``(users[k], items[k])`` stored in the CSR rows?

    ``keys`` is the :func:`pair_keys` cache used by the numpy path; it is
    rebuilt when omitted.
    """
    users = np.ascontiguousarray(users, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    if _accel.use_numba():
        return _observed_mask_nb(indptr, indices, users, items)
    if keys is None:
        keys = pair_keys(indptr, indices, n_cols)
    return _observed_mask_np(keys, n_cols, users, items)


# -- row scatter-add -------------------------------------------------------


@njit(cache=True)
def _scatter_add_rows_nb(dst, idx, src):
    d = dst.shape[1]
    for k in range(idx.shape[0]):
        r = idx[k]
        for j in range(d):
            dst[r, j] += src[k, j]


def _scatter_add_rows_np(dst, idx, src):
    np.add.at(dst, idx, src)


def scatter_add_rows(dst: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """``dst[idx[k]] += src[k]`` for every k, duplicates accumulated, in place."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    src = np.ascontiguousarray(src, dtype=dst.dtype).reshape(idx.shape[0], dst.shape[1])
    if _accel.use_numba():
        _scatter_add_rows_nb(dst, idx, src)
    else:
        _scatter_add_rows_np(dst, idx, src)


# -- sparse Adagrad --------------------------------------------------------


@njit(cache=True)
def _adagrad_rows_nb(param, acc, rows, grad, lr, eps):
    d = param.shape[1]
    for k in range(rows.shape[0]):
        r = rows[k]
        for j in range(d):
            g = grad[k, j]
            a = acc[r, j] + g * g
            acc[r, j] = a
            param[r, j] -= lr * g / (np.sqrt(a) + eps)


def _adagrad_rows_np(param, acc, rows, grad, lr, eps):
    a = acc[rows] + grad * grad
    acc[rows] = a
    param[rows] -= lr * grad / (np.sqrt(a) + eps)


def adagrad_rows(param: np.ndarray, acc: np.ndarray, rows: np.ndarray,
                 grad: np.ndarray, lr: float, eps: float) -> None:
    """In-place Adagrad on the listed (unique) rows of a 2-D parameter."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    grad = np.ascontiguousarray(grad, dtype=param.dtype).reshape(rows.shape[0], param.shape[1])
    if _accel.use_numba():
        _adagrad_rows_nb(param, acc, rows, grad, float(lr), float(eps))
    else:
        _adagrad_rows_np(param, acc, rows, grad, lr, eps)


# -- candidate ranking -----------------------------------------------------


@njit(cache=True)
def _count_ge_nb(pos, neg):
    n, c = neg.shape
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        p = pos[i]
        cnt = 0
        for j in range(c):
            if neg[i, j] >= p:
                cnt += 1
        out[i] = cnt
    return out


def count_ge(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Per row, how many entries of ``neg[i]`` are >= ``pos[i]``."""
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    neg = np.ascontiguousarray(neg, dtype=np.float64)
    if _accel.use_numba():
        return _count_ge_nb(pos, neg)
    return (neg >= pos[:, None]).sum(axis=1).astype(np.int64)


# -- fused gather/score and gradient scatter for embedding scorers --------


@njit(cache=True)
def _rowdot_nb(A, B, ia, ib):
    n = ia.shape[0]
    d = A.shape[1]
    out = np.empty(n)
    for k in range(n):
        a = ia[k]
        b = ib[k]
        s = 0.0
        for j in range(d):
            s += A[a, j] * B[b, j]
        out[k] = s
    return out


@njit(cache=True)
def _neg_sqdist_nb(A, B, ia, ib):
    n = ia.shape[0]
    d = A.shape[1]
    out = np.empty(n)
    for k in range(n):
        a = ia[k]
        b = ib[k]
        s = 0.0
        for j in range(d):
            t = A[a, j] - B[b, j]
            s += t * t
        out[k] = -s
    return out


@njit(cache=True)
def _dot_backward_nb(A, B, ia, ib, g, gA, gB):
    d = A.shape[1]
    for k in range(ia.shape[0]):
        a = ia[k]
        b = ib[k]
        w = g[k]
        for j in range(d):
            gA[a, j] += w * B[b, j]
            gB[b, j] += w * A[a, j]


@njit(cache=True)
def _sqdist_backward_nb(A, B, ia, ib, g, gA, gB):
    d = A.shape[1]
    for k in range(ia.shape[0]):
        a = ia[k]
        b = ib[k]
        w = -2.0 * g[k]
        for j in range(d):
            t = w * (A[a, j] - B[b, j])
            gA[a, j] += t
            gB[b, j] -= t


def _idx(x):
    return np.ascontiguousarray(x, dtype=np.int64).reshape(-1)


def rowdot(A, B, ia, ib) -> np.ndarray:
    """``out[k] = A[ia[k]] . B[ib[k]]``."""
    ia, ib = _idx(ia), _idx(ib)
    if _accel.use_numba():
        return _rowdot_nb(A, B, ia, ib)
    return np.einsum("ij,ij->i", A[ia], B[ib])


def neg_sqdist(A, B, ia, ib) -> np.ndarray:
    """``out[k] = -||A[ia[k]] - B[ib[k]]||^2``."""
    ia, ib = _idx(ia), _idx(ib)
    if _accel.use_numba():
        return _neg_sqdist_nb(A, B, ia, ib)
    diff = A[ia] - B[ib]
    return -np.einsum("ij,ij->i", diff, diff)


def dot_backward(A, B, ia, ib, g, gA, gB) -> None:
    """Accumulate ``g[k] * d(A[ia[k]] . B[ib[k]])`` into ``gA`` / ``gB``."""
    ia, ib = _idx(ia), _idx(ib)
    g = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    if _accel.use_numba():
        _dot_backward_nb(A, B, ia, ib, g, gA, gB)
    else:
        np.add.at(gA, ia, g[:, None] * B[ib])
        np.add.at(gB, ib, g[:, None] * A[ia])


def sqdist_backward(A, B, ia, ib, g, gA, gB) -> None:
    """Accumulate ``g[k] * d(-||A[ia[k]] - B[ib[k]]||^2)`` into ``gA`` / ``gB``.

    ``gA`` and ``gB`` may be the same array (item-item distances)."""
    ia, ib = _idx(ia), _idx(ib)
    g = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    if _accel.use_numba():
        _sqdist_backward_nb(A, B, ia, ib, g, gA, gB)
    else:
        t = -2.0 * g[:, None] * (A[ia] - B[ib])
        np.add.at(gA, ia, t)
        np.add.at(gB, ib, -t)
