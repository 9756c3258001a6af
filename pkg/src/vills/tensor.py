"""Minimal dense tensor arithmetic with reverse-mode differentiation.

Everything downstream (encoder, resampler, heads, losses) is expressed on
``Tensor``.  Data is always a C-contiguous float32/float64 numpy array in
row-major order.  Gradients are computed by recording executed operations on
a ``Tape`` and replaying it backwards; the tape is rebuilt from scratch every
training step, there is no persistent graph.

Typical use:

    with record() as tape:
        loss = some_scalar_graph(params)
    backward(loss, tape)
    # params now carry .grad

Forward passes outside ``record()`` (or inside ``no_grad()``) track nothing,
which is how teacher networks are kept gradient-free.
"""

from contextlib import contextmanager
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import backend
from .errors import EvaluationError, ParameterError, ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise UsageError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(scalar))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class TapeNode(NamedTuple):
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of executed operations; inputs always precede use."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)


_STACK: list[Optional[Tape]] = []


def active_tape() -> Optional[Tape]:
    return _STACK[-1] if _STACK else None


@contextmanager
def record(tape: Optional[Tape] = None):
    tape = tape if tape is not None else Tape()
    _STACK.append(tape)
    try:
        yield tape
    finally:
        _STACK.pop()


@contextmanager
def no_grad():
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray):
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._tracked for t in inputs):
        out._tracked = True
        tape.nodes.append(TapeNode(op, out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    Tensors the loss does not depend on are left untouched (grad stays None).
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss._tracked:
        raise UsageError("loss does not lie on a recorded tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is not None:
            node.backward(g)


def zero_grads(params):
    for p in params:
        p.grad = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and affine ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _apply("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _apply("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        scalar = float(b)
        out = a.data * scalar

        def bwd_scalar(g):
            _accumulate(a, g * scalar)

        return _apply("mul", out, (a,), bwd_scalar)

    b = as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _apply("mul", out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product: 2-d x 2-d, batched x shared-2-d, or equal-batched."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accumulate(b, gb)

    return _apply("matmul", out, (a, b), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bwd(g):
        _accumulate(a, np.transpose(g, inverse))

    return _apply("transpose", out, (a,), bwd)


def swapaxes(a, ax1, ax2) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.shape))

    return _apply("reshape", out, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _apply("concat", out, tuple(tensors), bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _apply("sum", out, (a,), bwd)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _apply("mean", out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out)

    return _apply("exp", out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return _apply("log", out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g / (2.0 * out))

    return _apply("sqrt", out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _apply("relu", out, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du))

    return _apply("gelu", out, (a,), bwd)


# ---------------------------------------------------------------------------
# row-wise kernels (softmax, layer norm, normalization, nearest-neighbour)
# ---------------------------------------------------------------------------


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a, temperature=1.0) -> Tensor:
    """Tempered softmax over the last axis, max-subtracted for stability."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    a = as_tensor(a)
    temperature = float(temperature)
    prob = backend.softmax_fwd(_rows(a.data), temperature)
    out = prob.reshape(a.shape)

    def bwd(g):
        gx = backend.softmax_bwd(prob, _rows(g), temperature)
        _accumulate(a, gx.reshape(a.shape))

    return _apply("softmax", out, (a,), bwd)


def log_softmax(a, temperature=1.0) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"log_softmax temperature must be positive, got {temperature}")
    a = as_tensor(a)
    z = a.data / float(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(g):
        gx = (g - np.exp(out) * g.sum(axis=-1, keepdims=True)) / float(temperature)
        _accumulate(a, gx)

    return _apply("log_softmax", out, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine extents {gain.shape}/{bias.shape} do not match width {d}")
    y, xhat, inv_std = backend.layer_norm_fwd(_rows(a.data), gain.data, bias.data, float(eps))
    out = y.reshape(a.shape)

    def bwd(g):
        gx, ggain, gbias = backend.layer_norm_bwd(xhat, inv_std, gain.data, _rows(g))
        _accumulate(a, gx.reshape(a.shape))
        _accumulate(gain, ggain)
        _accumulate(bias, gbias)

    return _apply("layer_norm", out, (a, gain, bias), bwd)


def l2_normalize(a, eps=1e-12) -> Tensor:
    """Scale last-axis rows to unit Euclidean length (smoothed by eps)."""
    a = as_tensor(a)
    n = np.sqrt(np.square(a.data).sum(axis=-1, keepdims=True) + eps)
    out = a.data / n

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - out * inner) / n)

    return _apply("l2_normalize", out, (a,), bwd)


def min_neighbor_distances(a) -> Tensor:
    """For embeddings [B, d], the distance from each row to its nearest other row."""
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ShapeError(f"min_neighbor_distances needs [B>=2, d], got {a.shape}")
    dist, idx = backend.min_neighbor_distances(np.ascontiguousarray(a.data))
    rows = np.arange(a.shape[0])

    def bwd(g):
        safe = np.where(dist > 0, dist, 1.0)
        diff = (a.data[rows] - a.data[idx]) * (np.where(dist > 0, g, 0.0) / safe)[:, None]
        ga = np.zeros_like(a.data)
        np.add.at(ga, rows, diff)
        np.subtract.at(ga, idx, diff)
        _accumulate(a, ga)

    return _apply("min_neighbor_distances", dist, (a,), bwd)


# ---------------------------------------------------------------------------
# initialization and verification helpers
# ---------------------------------------------------------------------------


def randn_param(rng: np.random.Generator, shape, scale, dtype=np.float32) -> Tensor:
    data = (rng.standard_normal(shape) * scale).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def finite_diff_check(f, params, h=1e-4) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``.  Returns the max over all parameter coordinates of
    |analytic - central| / (|analytic| + |central| + 1e-12).
    """
    if h <= 0:
        raise ParameterError(f"finite_diff_check step must be positive, got {h}")
    zero_grads(params)
    with record() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("function returned a non-finite value")
    backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    zero_grads(params)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise EvaluationError("function returned a non-finite value at a perturbed point")
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(gflat[i] - central) / (abs(gflat[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
