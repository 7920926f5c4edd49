"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operator set needed by the desk-scale architectures is provided:
valid stride-1 convolution, fully-connected layers, ReLU, 2x2 max pooling,
a 3x3 same-size max pool, zero padding, channel gather/concat, dropout and
the handful of scalar functions used by the losses.

Every op builds a node holding its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the graph in reverse
topological order and writes gradients into the trainable leaves.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents do not compose."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf reached a graph boundary."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, check: bool = True):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, check=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, check=False)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data, check=False)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad / bd, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (np.sign(xd) * g,), "abs")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the value was inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _node(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions and shape


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _node(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, g / n),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(np.array(x.data[idx]), (x,), backward, "getitem")


def take(x: Tensor, indices: Sequence[int], axis: int = 1) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (used for channel selection)."""
    indices = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = indices
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _node(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(xs)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return _node(np.concatenate([t.data for t in xs], axis=axis), xs, backward, "concat")


def pad2d(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two spatial axes of an NCHW tensor by ``p``."""
    if p == 0:
        return x
    H, W = x.shape[2], x.shape[3]
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    return _node(out, (x,), lambda g: (g[:, :, p:p + H, p:p + W],), "pad2d")


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """out[n, o] = sum_f x[n, f] * weight[o, f] + bias[o]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid, stride-1 cross-correlation of NCHW input with a KCkk kernel.

    Patches are gathered channel-last (kh, kw, C per row) and contracted
    against the matching flattened kernel in a single matrix product.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    K, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    if bias is not None and bias.shape != (K,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {K} filters")
    OH, OW = H - kh + 1, W - kw + 1
    xn = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    sN, sH, sW, sC = xn.strides
    cols = as_strided(xn, (N, OH, OW, kh, kw, C), (sN, sH, sW, sH, sW, sC)).reshape(N * OH * OW, kh * kw * C)
    wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(K, kh * kw * C)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(N, OH, OW, K).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * OH * OW, K)
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(K, kh, kw, C).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, OH, OW, kh, kw, C)
            gn = np.zeros((N, H, W, C))
            for i in range(kh):
                for j in range(kw):
                    gn[:, i:i + OH, j:j + OW, :] += dcols[:, :, :, i, j, :]
            gx = gn.transpose(0, 3, 1, 2)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; gradient goes to the first argmax in scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    xd = x.data
    quads = (xd[:, :, 0::2, 0::2], xd[:, :, 0::2, 1::2], xd[:, :, 1::2, 0::2], xd[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def backward(g):
        gx = np.zeros((N, C, H, W))
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, di::2, dj::2] = np.where(hit, g, 0.0)
        return (gx,)

    return _node(out, (x,), backward, "maxpool2")


def maxpool3_same(x: Tensor) -> Tensor:
    """3x3 max pool, stride 1, implicit -inf border so extents are kept."""
    N, C, H, W = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = sliding_window_view(padded, (3, 3), axis=(2, 3)).reshape(N, C, H, W, 9)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros((N, C, H + 2, W + 2))
        for k in range(9):
            i, j = divmod(k, 3)
            gp[:, :, i:i + H, j:j + W] += np.where(idx == k, g, 0.0)
        return (gp[:, :, 1:-1, 1:-1],)

    return _node(out, (x,), backward, "maxpool3_same")


def dropout_noise(x: Tensor, rate: float, active: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero each element with probability ``rate`` and
    rescale survivors by 1/(1-rate). Identity when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _node(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    lp = log_softmax(logits)
    n = logits.shape[0]
    picked = getitem(lp, (np.arange(n), np.asarray(labels, dtype=np.intp)))
    return mul(mean(picked), -1.0)


# ---------------------------------------------------------------- graph traversal


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Tensor] | dict[str, Tensor] | None = None) -> None:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients overwrite ``.grad`` on every trainable leaf reached. Leaves listed
    in ``parameters`` but not connected to the loss get a zero gradient and a
    warning.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {loss.data}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: set[int] = set()
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                reached.add(id(node))
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if parameters is not None:
        items = parameters.items() if isinstance(parameters, dict) else ((p.name, p) for p in parameters)
        for name, p in items:
            if id(p) not in reached:
                warnings.warn(f"parameter {name!r} is not connected to the loss; gradient set to zero",
                              stacklevel=2)
                p.grad = np.zeros_like(p.data)


def sgd_momentum_step(param: Tensor, velocity: np.ndarray, lr: float, momentum: float,
                      weight_decay: float) -> None:
    """In place: g = grad + wd*param; v = momentum*v + g; param -= lr*v."""
    if velocity.shape != param.shape:
        raise ShapeError(f"velocity shape {velocity.shape} != parameter shape {param.shape}")
    g = param.grad if param.grad is not None else np.zeros_like(param.data)
    if weight_decay:
        g = g + weight_decay * param.data
    velocity *= momentum
    velocity += g
    param.data -= lr * velocity
