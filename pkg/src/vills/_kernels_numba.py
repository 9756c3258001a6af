"""Numba-compiled twins of ``_kernels_numpy``.

Importing this module requires numba.  Kernels are written as explicit row
loops so each row is computed in one fused pass; ``cache=True`` persists the
compiled machine code next to the package.  ``fastmath`` stays off: results
must be reproducible and accurate enough for finite-difference checks.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_fwd(x, temperature):
    rows, width = x.shape
    out = np.empty_like(x)
    for i in range(rows):
        hi = x[i, 0]
        for j in range(1, width):
            if x[i, j] > hi:
                hi = x[i, j]
        total = 0.0
        for j in range(width):
            v = np.exp((x[i, j] - hi) / temperature)
            out[i, j] = v
            total += v
        for j in range(width):
            out[i, j] /= total
    return out


@njit(cache=True)
def softmax_bwd(prob, grad_out, temperature):
    rows, width = prob.shape
    grad_x = np.empty_like(prob)
    for i in range(rows):
        inner = 0.0
        for j in range(width):
            inner += grad_out[i, j] * prob[i, j]
        for j in range(width):
            grad_x[i, j] = prob[i, j] * (grad_out[i, j] - inner) / temperature
    return grad_x


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):
    rows, width = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(rows, dtype=x.dtype)
    for i in range(rows):
        mu = 0.0
        for j in range(width):
            mu += x[i, j]
        mu /= width
        var = 0.0
        for j in range(width):
            d = x[i, j] - mu
            var += d * d
        var /= width
        s = 1.0 / np.sqrt(var + eps)
        inv_std[i] = s
        for j in range(width):
            h = (x[i, j] - mu) * s
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, inv_std


@njit(cache=True)
def layer_norm_bwd(xhat, inv_std, gain, grad_out):
    rows, width = xhat.shape
    grad_x = np.empty_like(xhat)
    grad_gain = np.zeros(width, dtype=xhat.dtype)
    grad_bias = np.zeros(width, dtype=xhat.dtype)
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(width):
            gh = grad_out[i, j] * gain[j]
            m1 += gh
            m2 += gh * xhat[i, j]
        m1 /= width
        m2 /= width
        for i_j in range(width):
            gh = grad_out[i, i_j] * gain[i_j]
            grad_x[i, i_j] = (gh - m1 - xhat[i, i_j] * m2) * inv_std[i]
            grad_gain[i_j] += grad_out[i, i_j] * xhat[i, i_j]
            grad_bias[i_j] += grad_out[i, i_j]
    return grad_x, grad_gain, grad_bias


@njit(cache=True)
def min_neighbor_distances(e):
    rows, width = e.shape
    dist = np.empty(rows, dtype=e.dtype)
    idx = np.empty(rows, dtype=np.int64)
    for i in range(rows):
        best = np.inf
        best_j = -1
        for j in range(rows):
            if j == i:
                continue
            sq = 0.0
            for k in range(width):
                d = e[i, k] - e[j, k]
                sq += d * d
            if sq < best:
                best = sq
                best_j = j
        dist[i] = np.sqrt(best)
        idx[i] = best_j
    return dist, idx
