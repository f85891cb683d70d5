"""Dense tensors with reverse-mode automatic differentiation.

Values live in contiguous row-major numpy arrays (float32 unless a float64
array is passed in explicitly, which the gradient checker relies on). Every
operation records its inputs and a closure computing input gradients from
the output gradient; :func:`backward` walks the recorded graph once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "GraphNode",
    "no_grad",
    "is_grad_enabled",
    "build_graph",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "softmax_rows",
    "group_norm",
    "silu",
    "reshape",
    "transpose",
    "concat",
    "tsum",
    "mean",
    "avg_pool2x",
    "upsample2x",
    "mse",
    "grad_check",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, a: Sequence[int], b: Sequence[int], detail: str = ""):
        self.op = op
        self.shape_a = tuple(a)
        self.shape_b = tuple(b)
        msg = f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_grad_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64 and isinstance(value, np.ndarray):
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """A dense array that can take part in a differentiable computation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str, grad_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = grad_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, inputs: Iterable["Tensor"] | None = None) -> None:
        backward(self, inputs)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.size == 1 and b.ndim <= a.ndim:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None
    if out != a.shape and out != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape, "neither operand spans the result")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), "add", grad_fn)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), "mul", grad_fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def grad_fn(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return Tensor._from_op(xd * sig, (x,), "silu", grad_fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape, "inner dimensions differ")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(np.matmul(ad, bd), (a, b), "matmul", grad_fn)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeMismatchError("conv2d", x.shape, w.shape, "expected [B,C,H,W] and [O,C,3,3]")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape, "channel mismatch")
    B, C, H, W = x.shape
    O = w.shape[0]
    # columns ordered (kernel row, kernel col, channel) so every offset is a contiguous C-chunk
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, H, W, 3, 3, C), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i : i + H, j : j + W, :]
    cols = cols.reshape(B * H * W, 9 * C)
    wm = w.data.transpose(0, 2, 3, 1).reshape(O, 9 * C)
    out = (cols @ wm.T).reshape(B, H, W, O).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gm.T @ cols).reshape(O, 3, 3, C).transpose(0, 3, 1, 2)
        gcols = (gm @ wm).reshape(B, H, W, 3, 3, C)
        gxp = np.zeros((B, H + 2, W + 2, C), dtype=gcols.dtype)
        for i in range(3):
            for j in range(3):
                gxp[:, i : i + H, j : j + W, :] += gcols[:, :, :, i, j, :]
        return gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2), gw

    return Tensor._from_op(out, (x, w), "conv2d", grad_fn)


# ---------------------------------------------------------------- normalization


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), "softmax", grad_fn)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel-group) slice to zero mean, unit variance.

    No affine transform is applied here; callers compose one from mul/add.
    """
    if x.ndim < 2 or groups < 1 or x.shape[1] % groups:
        raise ShapeMismatchError("group_norm", x.shape, (groups,), "channels not divisible by groups")
    shape = x.shape
    xg = x.data.reshape(shape[0], groups, -1)
    n = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_fn(g):
        gg = g.reshape(xg.shape)
        s1 = gg.sum(axis=-1, keepdims=True)
        s2 = (gg * xhat).sum(axis=-1, keepdims=True)
        gx = (inv / n) * (n * gg - s1 - xhat * s2)
        return (gx.reshape(shape),)

    return Tensor._from_op(xhat.reshape(shape).astype(x.dtype, copy=False), (x,), "group_norm", grad_fn)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))

    def grad_fn(g):
        return (g.reshape(src),)

    return Tensor._from_op(out, (x,), "reshape", grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (g.transpose(inverse),)

    return Tensor._from_op(x.data.transpose(axes), (x,), "transpose", grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", grad_fn)


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), "sum", grad_fn)


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size

    def grad_fn(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return Tensor._from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), "mean", grad_fn)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._from_op(out, (x,), "avg_pool", grad_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), "upsample", grad_fn)


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------- graph + backward


@dataclass
class GraphNode:
    id: int
    op: str
    inputs: list[int] = field(default_factory=list)
    tensor: Tensor | None = None


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def build_graph(root: Tensor) -> list[GraphNode]:
    """Recorded graph feeding ``root`` in topological order (inputs first)."""
    order = _topo_order(root)
    index = {id(t): i for i, t in enumerate(order)}
    return [GraphNode(i, t.op, [index[id(p)] for p in t._parents], t) for i, t in enumerate(order)]


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Leaves listed in ``inputs`` that do not feed ``loss`` receive a zero grad.
    """
    if loss.size != 1:
        raise ShapeMismatchError("backward", loss.shape, (), "loss must be a scalar")
    for t in inputs or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    Both routes run in float64: ``f`` must build its graph from the tensor it
    is handed and return a scalar.
    """
    x64 = np.array(np.asarray(x.data if isinstance(x, Tensor) else x), dtype=np.float64)
    leaf = Tensor(x64.copy(), requires_grad=True, dtype=np.float64)
    loss = f(leaf)
    backward(loss, [leaf])
    auto = leaf.grad.reshape(-1)

    flat = x64.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(Tensor(x64.copy(), dtype=np.float64)).data.item()
            flat[i] = orig - h
            down = f(Tensor(x64.copy(), dtype=np.float64)).data.item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
    return float(np.max(np.abs(auto - numeric) / (np.abs(numeric) + 1e-8)))
