"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public names at the bottom dispatch on ``calibra._accel.BACKEND``; the
``*.numba_impl`` / ``*.numpy_impl`` attributes expose both paths for the
equivalence tests and ``benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import numpy as np

from ._accel import njit, pick

KSIZE = 5
DILATION = 2


# --------------------------------------------------------------------------
# dilated im2col
# --------------------------------------------------------------------------

@njit
def _im2col_nb(x, ksize, dilation):
    C, H, W = x.shape
    half = ksize // 2
    out = np.zeros((H * W, C * ksize * ksize), dtype=np.float64)
    for i in range(H):
        for j in range(W):
            row = i * W + j
            col = 0
            for c in range(C):
                for dy in range(ksize):
                    ii = i + (dy - half) * dilation
                    for dx in range(ksize):
                        jj = j + (dx - half) * dilation
                        if 0 <= ii < H and 0 <= jj < W:
                            out[row, col] = x[c, ii, jj]
                        col += 1
    return out


def _im2col_np(x, ksize, dilation):
    C, H, W = x.shape
    reach = (ksize // 2) * dilation
    padded = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (reach, reach), (reach, reach)))
    out = np.empty((C, ksize, ksize, H, W), dtype=np.float64)
    for dy in range(ksize):
        for dx in range(ksize):
            out[:, dy, dx] = padded[:, dy * dilation:dy * dilation + H, dx * dilation:dx * dilation + W]
    return np.ascontiguousarray(out.reshape(C * ksize * ksize, H * W).T)


# --------------------------------------------------------------------------
# Chebyshev window max/min over valid labels
# --------------------------------------------------------------------------

@njit
def _window_minmax_nb(labels, valid, radius):
    H, W = labels.shape
    big = np.iinfo(np.int64).max
    small = np.iinfo(np.int64).min
    hi = np.full((H, W), small, dtype=np.int64)
    lo = np.full((H, W), big, dtype=np.int64)
    for i in range(H):
        for j in range(W):
            for ii in range(max(0, i - radius), min(H, i + radius + 1)):
                for jj in range(max(0, j - radius), min(W, j + radius + 1)):
                    if valid[ii, jj]:
                        v = labels[ii, jj]
                        if v > hi[i, j]:
                            hi[i, j] = v
                        if v < lo[i, j]:
                            lo[i, j] = v
    return hi, lo


def _window_minmax_np(labels, valid, radius):
    big = np.iinfo(np.int64).max
    small = np.iinfo(np.int64).min
    lab = np.asarray(labels, dtype=np.int64)
    up = np.pad(np.where(valid, lab, small), radius, constant_values=small)
    dn = np.pad(np.where(valid, lab, big), radius, constant_values=big)
    win = 2 * radius + 1
    hi = np.lib.stride_tricks.sliding_window_view(up, (win, win)).max(axis=(-2, -1))
    lo = np.lib.stride_tricks.sliding_window_view(dn, (win, win)).min(axis=(-2, -1))
    return hi, lo


# --------------------------------------------------------------------------
# brute-force nearest distances between point sets
# --------------------------------------------------------------------------

@njit
def _min_dist_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        for k in range(m):
            dy = a[i, 0] - b[k, 0]
            dx = a[i, 1] - b[k, 1]
            d = dy * dy + dx * dx
            if d < best:
                best = d
        out[i] = np.sqrt(best)
    return out


def _min_dist_np(a, b, chunk=2048):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a), dtype=np.float64)
    if len(b) == 0:
        out.fill(np.inf)
        return out
    for s in range(0, len(a), chunk):
        d = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt((d * d).sum(axis=-1).min(axis=1))
    return out


# --------------------------------------------------------------------------
# per-pixel joint label fusion weights
# --------------------------------------------------------------------------

@njit
def _jlf_solve_nb(probs, reg):
    K, n = probs.shape
    out = np.empty((K, n), dtype=np.float64)
    A = np.empty((n, n), dtype=np.float64)
    x = np.empty(n, dtype=np.float64)
    for k in range(K):
        for i in range(n):
            ui = 1.0 - probs[k, i]
            for j in range(n):
                A[i, j] = ui * (1.0 - probs[k, j])
            A[i, i] += reg[k]
            x[i] = 1.0
        # forward elimination with partial pivoting
        for col in range(n):
            piv = col
            best = abs(A[col, col])
            for r in range(col + 1, n):
                if abs(A[r, col]) > best:
                    best = abs(A[r, col])
                    piv = r
            if piv != col:
                for j in range(n):
                    tmp = A[col, j]
                    A[col, j] = A[piv, j]
                    A[piv, j] = tmp
                tmp = x[col]
                x[col] = x[piv]
                x[piv] = tmp
            d = A[col, col]
            for r in range(col + 1, n):
                f = A[r, col] / d
                if f != 0.0:
                    for j in range(col, n):
                        A[r, j] -= f * A[col, j]
                    x[r] -= f * x[col]
        for i in range(n - 1, -1, -1):
            s = x[i]
            for j in range(i + 1, n):
                s -= A[i, j] * x[j]
            x[i] = s / A[i, i]
        total = 0.0
        for i in range(n):
            total += x[i]
        for i in range(n):
            out[k, i] = x[i] / total
    return out


def _jlf_solve_np(probs, reg):
    probs = np.asarray(probs, dtype=np.float64)
    K, n = probs.shape
    u = 1.0 - probs
    A = u[:, :, None] * u[:, None, :]
    A[:, np.arange(n), np.arange(n)] += np.asarray(reg, dtype=np.float64)[:, None]
    x = np.linalg.solve(A, np.ones((K, n, 1)))[..., 0]
    return x / x.sum(axis=1, keepdims=True)


im2col_dilated = pick(_im2col_nb, _im2col_np)
window_minmax = pick(_window_minmax_nb, _window_minmax_np)
min_distances = pick(_min_dist_nb, _min_dist_np)
jlf_solve = pick(_jlf_solve_nb, _jlf_solve_np)
