"""A minimal reverse-mode autodiff tensor on top of numpy.

Every op builds its output from numpy arrays and, when any input requires a
gradient, records a closure mapping the output gradient to one gradient per
input. ``backward`` walks the recorded graph once in reverse topological
order. Leaf gradients accumulate across calls until ``zero_grad``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from lgaf import kernels

#: name -> op function, for every op with a hand-written backward.
OPS: dict[str, Callable] = {}

_grad_enabled = True
_relu_masks: list | None = None


class ShapeError(ValueError):
    """Raised when operand shapes disagree; the message names the dimension."""


def differentiable(name):
    def register(fn):
        OPS[name] = fn
        return fn

    return register


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, embedding extraction)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_relu_masks():
    """Collect every relu activation mask computed inside the block.

    Gradient checks use this to detect probes that straddle a relu kink.
    """
    global _relu_masks
    prev = _relu_masks
    _relu_masks = []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable checkpoint name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data, parents, backward_fn, op) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


@differentiable("add")
def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


@differentiable("sub")
def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


@differentiable("mul")
def mul(a, b) -> Tensor:
    """Broadcasting elementwise product (used for attention gating)."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), back, "mul")


@differentiable("relu")
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


@differentiable("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape


@differentiable("sum")
def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


@differentiable("mean")
def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


@differentiable("reshape")
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


@differentiable("transpose")
def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


@differentiable("concat")
def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for i, x in enumerate(xs[1:], 1):
        if x.ndim != len(ref):
            raise ShapeError(f"concat: input {i} has {x.ndim} dims, expected {len(ref)}")
        for d in range(len(ref)):
            if d != ax and x.shape[d] != ref[d]:
                raise ShapeError(f"concat: input {i} dim {d} is {x.shape[d]}, expected {ref[d]}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def back(g):
        out = []
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, back, "concat")


# ---------------------------------------------------------------- layers


@differentiable("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col + GEMM.

    x is [N, C, H, W], weight is [K, C, k, k]; output is [N, K, H', W'] with
    H' = (H + 2*padding - k) // stride + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D [N,C,H,W], got {x.ndim}-D")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D [K,C,k,k], got {weight.ndim}-D")
    n, c, h, w = x.shape
    kout, kc, k, k2 = weight.shape
    if kc != c:
        raise ShapeError(f"conv2d: input channels (dim 1) is {c} but weight expects {kc}")
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if bias is not None and bias.shape != (kout,):
        raise ShapeError(f"conv2d: bias dim 0 is {bias.shape}, expected ({kout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: padded spatial size {hp}x{wp} smaller than kernel {k}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xd = np.ascontiguousarray(xd)
    cols = kernels.im2col(xd, k, stride, ho, wo)
    wmat = weight.data.reshape(kout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, kout).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, kout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(gm @ wmat)
            gx = kernels.col2im(dcols, n, c, hp, wp, k, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _result(out, parents, back, "conv2d")


@differentiable("linear")
def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W + b with x [N, D], W [D, E], b [E]."""
    if x.ndim != 2:
        raise ShapeError(f"linear: input must be 2-D [N,D], got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"linear: input dim 1 is {x.shape[1]} but weight dim 0 is {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias dim 0 is {bias.shape[0]}, expected {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, parents, back, "linear")


@differentiable("global_avg_pool")
def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D [N,C,H,W], got {x.ndim}-D")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    return _result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),),
        "global_avg_pool",
    )


@differentiable("l2_norm")
def l2_norm(x: Tensor) -> Tensor:
    """Per-row Euclidean norm of [N, D]; gradient at a zero row is 0."""
    if x.ndim != 2:
        raise ShapeError(f"l2_norm: input must be 2-D [N,D], got shape {x.shape}")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1))

    def back(g):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm[:, None] > 0, xd / safe[:, None], 0.0) * g[:, None],)

    return _result(norm, (x,), back, "l2_norm")


@differentiable("normalize")
def normalize(x: Tensor, axis: int = 1) -> Tensor:
    """Unit-length rescaling along ``axis``; zero slices raise."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("normalize: zero-norm slice")
    y = xd / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result(y, (x,), back, "normalize")


class BatchNormState:
    """Running statistics for :func:`batch_norm_1d`."""

    def __init__(self, dim, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


@differentiable("batch_norm_1d")
def batch_norm_1d(x: Tensor, state: BatchNormState, training: bool,
                  gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"batch_norm_1d: input must be 2-D [N,D], got shape {x.shape}")
    n = x.shape[0]
    xd = x.data
    if training:
        if n < 2:
            raise ValueError("batch_norm_1d: training mode needs batch size >= 2")
        mean = xd.mean(axis=0)
        var = xd.var(axis=0)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * n / (n - 1)).astype(state.running_var.dtype)
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = ((xd - mean) * inv).astype(xd.dtype)
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def back(g):
        gx_hat = g * gamma.data if gamma is not None else g
        if training:
            gx = inv / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        else:
            gx = gx_hat * inv
        grads = [gx.astype(xd.dtype)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=0))
        if beta is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out.astype(xd.dtype), parents, back, "batch_norm_1d")


@differentiable("softmax_cross_entropy")
def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the target class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels dim 0 is {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (g / n)).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_cross_entropy")


@differentiable("cosface_logits")
def cosface_logits(cos: Tensor, labels, s: float, m: float) -> Tensor:
    """s*(cos - m) on target entries, s*cos elsewhere."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(cos.shape[0])
    out = cos.data.copy()
    out[rows, labels] -= m
    out *= s
    return _result(out, (cos,), lambda g: (g * s,), "cosface_logits")


@differentiable("arcface_logits")
def arcface_logits(cos: Tensor, labels, s: float, m: float) -> Tensor:
    """s*cos(theta+m) on target entries when cos > cos(pi-m), else s*(cos - m*sin m)."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(cos.shape[0])
    c = cos.data[rows, labels]
    sin_t = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    cos_m, sin_m = np.cos(m), np.sin(m)
    threshold = np.cos(np.pi - m)
    use_arc = c > threshold
    target = np.where(use_arc, c * cos_m - sin_t * sin_m, c - m * sin_m)
    out = cos.data.copy()
    out[rows, labels] = target
    out *= s
    # d cos(theta+m) / d cos(theta) = cos m + sin m * cos/sin(theta)
    safe_sin = np.maximum(sin_t, 1e-12)
    dtarget = np.where(use_arc, cos_m + sin_m * c / safe_sin, 1.0)

    def back(g):
        gc = g * s
        gc[rows, labels] *= dtarget
        return (gc,)

    return _result(out, (cos,), back, "arcface_logits")
