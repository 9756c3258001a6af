"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_kernels_numba``; the active set is
chosen once at import time by ``vills.backend``.  All kernels take and return
2-d C-contiguous arrays of one float dtype ([rows, width] views of whatever
leading shape the caller flattened away).
"""

import numpy as np


def softmax_fwd(x, temperature):
    z = x / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(prob, grad_out, temperature):
    inner = (grad_out * prob).sum(axis=1, keepdims=True)
    return prob * (grad_out - inner) / temperature


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (y, xhat, inv_std)."""
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layer_norm_bwd(xhat, inv_std, gain, grad_out):
    """Returns (grad_x, grad_gain, grad_bias)."""
    gh = grad_out * gain
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = (gh * xhat).mean(axis=1, keepdims=True)
    grad_x = (gh - m1 - xhat * m2) * inv_std[:, None]
    return grad_x, (grad_out * xhat).sum(axis=0), grad_out.sum(axis=0)


def min_neighbor_distances(e):
    """Per-row Euclidean distance to the nearest other row.

    Returns (distances [B], argmin indices [B]); ties resolve to the lowest
    index.  Requires B >= 2.
    """
    sq = np.square(e[:, None, :] - e[None, :, :]).sum(axis=2)
    np.fill_diagonal(sq, np.inf)
    idx = sq.argmin(axis=1)
    d = np.sqrt(sq[np.arange(e.shape[0]), idx])
    return d.astype(e.dtype), idx.astype(np.int64)
