"""Reverse-mode differentiation over dense float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure mapping the upstream gradient to per-input gradients.
``backward`` walks the recorded graph in reverse topological order.

Layout conventions: images and videos are channels-last, so ``conv2d`` takes
``(B, H, W, Cin)`` with kernels ``(kh, kw, Cin, Cout)`` and ``conv3d`` takes
``(B, T, H, W, Cin)`` with kernels ``(kt, kh, kw, Cin, Cout)``.  Elementwise
ops only accept equal shapes or a scalar operand.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A graph node holding a float64 array and its gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting exists, so reduction is either full or none
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def fn(g):
        return (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape))

    return _node(out, (a, b), fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive input")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    live = a.data > 0
    return _node(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes wherever the input lies in the closed range."""
    a = as_tensor(a)
    keep = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * keep,), "clamp")


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), fn, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes)

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _node(out, (a,), fn, "reduce_sum")


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes) if axes else a.data.copy()

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / count,)

    return _node(out, (a,), fn, "reduce_mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    out = a.data[index]
    if not np.shares_memory(out, a.data) and np.ndim(out) > 0:
        raise ShapeError("slice: only basic indexing is supported")

    def fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(np.array(out, copy=True), (a,), fn, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts[1:]:
        other = tuple(s for i, s in enumerate(t.shape) if i != ax)
        first = tuple(s for i, s in enumerate(ts[0].shape) if i != ax)
        if t.data.ndim != ndim or other != first:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, fn, "concat")


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with the bias added to every row of a 2-D input."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    out = x.data @ w.data
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} vs output width {w.shape[1]}")
        out = out + b.data
        parents.append(b)

    def fn(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _node(out, parents, fn, "linear")


def _pads(kernel: Sequence[int], padding: str) -> list[tuple[int, int]]:
    if padding == "valid":
        return [(0, 0)] * len(kernel)
    if padding == "same":
        return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]
    raise ValueError(f"unknown padding {padding!r}")


def _conv(x: Tensor, w: Tensor, b, padding: str, nd: int, op: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim == nd + 1 and w.data.ndim == nd + 2:
        # unbatched input: add and later drop a leading batch axis
        out = _conv(reshape(x, (1,) + x.shape), w, b, padding, nd, op)
        return reshape(out, out.shape[1:])
    if x.data.ndim != nd + 2 or w.data.ndim != nd + 2:
        raise ShapeError(f"{op}: expected rank {nd + 2} input and kernel, got {x.shape} and {w.shape}")
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"{op}: channel mismatch {x.shape} vs {w.shape}")
    kernel = w.shape[:nd]
    pads = _pads(kernel, padding)
    spatial = x.shape[1:1 + nd]
    if any(s + lo + hi < k for s, k, (lo, hi) in zip(spatial, kernel, pads)):
        raise ShapeError(f"{op}: kernel {w.shape} larger than input {x.shape}")
    xp = np.pad(x.data, [(0, 0)] + pads + [(0, 0)])
    out_sp = tuple(s + lo + hi - k + 1 for s, k, (lo, hi) in zip(spatial, kernel, pads))
    cin, cout = w.shape[-2], w.shape[-1]
    # one (..., Cin) @ (Cin, Cout) product per kernel tap
    taps = [(tap, (slice(None),) + tuple(slice(t, t + o) for t, o in zip(tap, out_sp)))
            for tap in itertools.product(*(range(k) for k in kernel))]
    out = np.zeros((x.shape[0],) + out_sp + (cout,))
    for tap, sl in taps:
        out += xp[sl] @ w.data[tap]
    parents: list[Tensor] = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"{op}: bias shape {b.shape} vs {cout} output channels")
        out = out + b.data
        parents.append(b)

    def fn(g):
        g2 = g.reshape(-1, cout)
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for tap, sl in taps:
            dw[tap] = xp[sl].reshape(-1, cin).T @ g2
            dxp[sl] += g @ w.data[tap].T
        crop = (slice(None),) + tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, spatial))
        grads = [dxp[crop], dw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _node(out, parents, fn, op)


def conv2d(x, w, b=None, padding: str = "same") -> Tensor:
    """Stride-1 2-D convolution (cross-correlation), channels-last.

    ``x`` is ``(B, H, W, Cin)`` or unbatched ``(H, W, Cin)``; ``w`` is ``(kh, kw, Cin, Cout)``.
    """
    return _conv(x, w, b, padding, 2, "conv2d")


def conv3d(x, w, b=None, padding: str = "same") -> Tensor:
    """Stride-1 3-D convolution (cross-correlation), channels-last."""
    return _conv(x, w, b, padding, 3, "conv3d")


def avg_pool(a, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` average pool over the two axes before channels."""
    a = as_tensor(a)
    if a.data.ndim < 3:
        raise ShapeError(f"avg_pool: need rank >= 3, got {a.shape}")
    *lead, h, w, c = a.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool: spatial extents {(h, w)} not divisible by {size}")
    blocks = a.data.reshape(*lead, h // size, size, w // size, size, c)
    out = blocks.mean(axis=(-4, -2))

    def fn(g):
        up = np.repeat(np.repeat(g, size, axis=-3), size, axis=-2)
        return (up / (size * size),)

    return _node(out, (a,), fn, "avg_pool")


# ---------------------------------------------------------------------------
# engine


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward_map(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of ``loss`` for every node reachable from it, keyed by ``id(node)``."""
    if loss.data.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topological(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the full gradient map of :func:`backward_map`.
    """
    grads = backward_map(loss)
    if loss.requires_grad:
        for node in _topological(loss):
            if node._backward is None:
                node.grad = node.grad + grads.get(id(node), 0.0)
    loss.grad = grads[id(loss)]
    return grads


def grad(loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``leaves`` without touching their accumulators."""
    grads = backward_map(loss)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in leaves]


def custom_op(inputs: Sequence[Tensor], value: np.ndarray, fn: BackwardFn, op: str) -> Tensor:
    """Register an op whose backward is supplied by the caller."""
    return _node(np.asarray(value, dtype=np.float64), [as_tensor(t) for t in inputs], fn, op)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between the backward pass and central differences.

    ``f`` maps a tensor to a scalar tensor.  Each coordinate's error is
    ``|analytic - fd| / max(|fd|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    (analytic,) = grad(f(leaf), [leaf])
    flat = base.reshape(-1)
    fd = np.empty(flat.size)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
        fd[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic.reshape(-1) - fd) / np.maximum(np.abs(fd), 1e-8)
    return float(err.max()) if err.size else 0.0
