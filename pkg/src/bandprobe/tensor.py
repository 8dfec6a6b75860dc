"""A small dense-tensor engine with reverse-mode differentiation.

Only the operators a U-Net needs are provided. Every op accepts either a
single image ``(C, H, W)`` or a batch ``(N, C, H, W)`` and returns the same
rank it was given.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_DEFAULT_DTYPE = np.float32
_grad_state = threading.local()

PROB_FLOOR = 1e-12
ELU_ALPHA = 1.0


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default precision (float64 is meant for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled():
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording a graph (per thread)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """An ndarray plus the bookkeeping needed to back-propagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        # aligned storage: misaligned buffers take different BLAS paths
        self.data = np.require(data, dtype=dtype or _DEFAULT_DTYPE, requirements=("C", "A"))
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor in the graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _as4d(x, what):
    if x.ndim == 4:
        return x.data, False
    if x.ndim == 3:
        return x.data[None], True
    raise ShapeError(f"{what}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _restore(arr, squeezed):
    return arr[0] if squeezed else arr


# -- elementwise and reductions -------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        ga = g if a.shape == g.shape else np.asarray(g.sum()).reshape(a.shape)
        gb = g if b.shape == g.shape else np.asarray(g.sum()).reshape(b.shape)
        return ga, gb

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.asarray(ga.sum()).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.asarray(gb.sum()).reshape(b.shape)
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def tensor_sum(x):
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def tensor_mean(x):
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


# -- layer primitives -----------------------------------------------------


def conv2d(x, kernel, bias):
    """Same-padded cross-correlation; kernel (C_out, C_in, k, k) with k in {1, 3}."""
    x4, squeezed = _as4d(x, "conv2d")
    n, c, h, w = x4.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"conv2d: unsupported kernel size {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if kh == 3:
        cols = kernels.im2col3x3(x4)
    else:
        cols = x4.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out) + bias.data[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeezed else g
        gm = g4.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = wmat.T @ gm
            if kh == 3:
                gx = kernels.col2im3x3(dcols, n, c, h, w)
            else:
                gx = np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            gx = _restore(gx, squeezed)
        return gx, gk, gb

    return _result(_restore(out, squeezed), (x, kernel, bias), backward)


def transposed_conv2d(x, kernel, bias):
    """Stride-2, 2x2 transposed convolution; kernel (C_in, C_out, 2, 2)."""
    x4, squeezed = _as4d(x, "transposed_conv2d")
    n, c, h, w = x4.shape
    cin, cout, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, kernel expects {cin}")
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed_conv2d: kernel must be 2x2, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({cout},)")
    xm = x4.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    kmat = kernel.data.reshape(cin, cout * 4)
    y = (kmat.T @ xm).reshape(cout, 2, 2, n, h, w)
    out = y.transpose(3, 0, 4, 1, 5, 2).reshape(n, cout, 2 * h, 2 * w)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeezed else g
        gm = (
            g4.reshape(n, cout, h, 2, w, 2)
            .transpose(1, 3, 5, 0, 2, 4)
            .reshape(cout * 4, n * h * w)
        )
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (xm @ gm.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = (kmat @ gm).reshape(c, n, h, w).transpose(1, 0, 2, 3)
            gx = _restore(np.ascontiguousarray(gx), squeezed)
        return gx, gk, gb

    return _result(_restore(np.ascontiguousarray(out), squeezed), (x, kernel, bias), backward)


def elu(x):
    neg = np.expm1(np.minimum(x.data, 0)) * x.dtype.type(ELU_ALPHA)
    pos = x.data > 0
    out = np.where(pos, x.data, neg)

    def backward(g):
        return (g * np.where(pos, 1, neg + x.dtype.type(ELU_ALPHA)).astype(x.dtype),)

    return _result(out, (x,), backward)


def maxpool2d(x):
    x4, squeezed = _as4d(x, "maxpool2d")
    h, w = x4.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    out, idx = kernels.maxpool2x2(x4)

    def backward(g):
        g4 = g[None] if squeezed else g
        return (_restore(kernels.maxpool2x2_backward(g4, idx), squeezed),)

    return _result(_restore(out, squeezed), (x,), backward)


def concat_channels(a, b):
    axis = a.ndim - 3
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels: ranks {a.ndim} and {b.ndim}")
    if a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1:] != b.shape[axis + 1:]:
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} are incompatible")
    ca = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def backward(g):
        if axis == 0:
            return g[:ca], g[ca:]
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    return _result(out, (a, b), backward)


def softmax_channels(x):
    axis = x.ndim - 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"softmax_channels: expected rank 3 or 4, got {x.ndim}")
    if x.shape[axis] < 2:
        raise ShapeError("softmax_channels: need at least 2 channels")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward)


def cross_entropy(pred, target):
    """Mean over pixels of -log p[target], with p floored at ``PROB_FLOOR``."""
    axis = pred.ndim - 3
    target = np.asarray(target)
    k = pred.shape[axis]
    if not np.issubdtype(target.dtype, np.integer):
        if np.any(target != np.round(target)):
            raise ValueError("cross_entropy: target must hold integer class indices")
        target = target.astype(np.int64)
    expected = pred.shape[:axis] + pred.shape[axis + 1:]
    if target.shape != expected:
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {expected}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"cross_entropy: target classes must lie in [0, {k})")
    idx = np.expand_dims(target.astype(np.intp), axis)
    p = np.take_along_axis(pred.data, idx, axis=axis)
    floored = np.maximum(p, pred.dtype.type(PROB_FLOOR))
    m = target.size
    loss = np.asarray(-np.log(floored).sum() / m, dtype=pred.dtype)
    if not np.isfinite(loss):
        raise FloatingPointError("cross_entropy: non-finite loss")

    def backward(g):
        gp = np.zeros_like(pred.data)
        local = np.where(p > PROB_FLOOR, -1.0 / (floored * m), 0).astype(pred.dtype)
        np.put_along_axis(gp, idx, local * g, axis=axis)
        return (gp,)

    return _result(loss, (pred,), backward)


# -- batch normalisation ---------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel running statistics for one batch-norm layer."""

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None, repr=False)
    running_var: np.ndarray = field(default=None, repr=False)
    initialized: bool = False
    dtype: type = np.float32

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=self.dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=self.dtype)

    def reset(self):
        """Explicitly initialise running stats to mean 0 / var 1."""
        self.running_mean = np.zeros(self.channels, dtype=self.dtype)
        self.running_var = np.ones(self.channels, dtype=self.dtype)
        self.initialized = True

    def update(self, mean, var, count):
        unbiased = var.astype(np.float64) * (count / (count - 1) if count > 1 else 1.0)
        mom = self.momentum
        rm = (1 - mom) * self.running_mean.astype(np.float64) + mom * mean.astype(np.float64)
        rv = (1 - mom) * self.running_var.astype(np.float64) + mom * unbiased
        self.running_mean = rm.astype(self.dtype)
        self.running_var = rv.astype(self.dtype)
        self.initialized = True


def batchnorm2d(x, scale, shift, state, training):
    x4, squeezed = _as4d(x, "batchnorm2d")
    c = x4.shape[1]
    if scale.shape != (c,) or shift.shape != (c,) or state.channels != c:
        raise ShapeError(f"batchnorm2d: {c} channels but params/state sized differently")
    dt = x.dtype.type
    gamma = scale.data[None, :, None, None]
    beta = shift.data[None, :, None, None]
    if training:
        m = x4.shape[0] * x4.shape[2] * x4.shape[3]
        mean = x4.mean(axis=(0, 2, 3))
        centered = x4 - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        invstd = (1.0 / np.sqrt(var + dt(state.eps))).astype(x.dtype)
        xhat = centered * invstd[None, :, None, None]
        state.update(mean, var, m)
    else:
        if not state.initialized:
            raise RuntimeError(
                "batchnorm2d: eval mode needs running statistics; train first or call reset()"
            )
        m = None
        mean = state.running_mean.astype(x.dtype)
        invstd = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + dt(state.eps))).astype(x.dtype)
        xhat = (x4 - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma + beta

    def backward(g):
        g4 = g[None] if squeezed else g
        gs = (g4 * xhat).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g4 * gamma
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (invstd[None, :, None, None] / dt(m)) * (dt(m) * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd[None, :, None, None]
            gx = _restore(gx.astype(x.dtype, copy=False), squeezed)
        return gx, gs, gb

    return _result(_restore(out, squeezed), (x, scale, shift), backward)
