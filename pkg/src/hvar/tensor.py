"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per parent.
The tape is implicit in those links and is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """Raised when a tensor that must be finite contains NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NonFiniteError(f"{what} contains {bad} non-finite values (shape {self.shape})")
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Without an explicit ``grad`` the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (loss must be scalar)", self.shape)
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
            if grad.shape != self.shape:
                raise ShapeError("backward", self.shape, grad.shape)
        if not self.requires_grad:
            raise RuntimeError("backward called on a tensor that does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

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
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _stable_sigmoid(a.data),))


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(x))`` evaluated without forming the sigmoid."""
    a = as_tensor(a)
    return _result(-np.logaddexp(0.0, -a.data), (a,), lambda g: (g * _stable_sigmoid(-a.data),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation (GPT-2 convention)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true else ``b``; mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                              _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# reductions and shape ------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice, type(None))) or p is Ellipsis for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE, copy=True), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# linear algebra ------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError("linear", x.shape, weight.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out.reshape(*lead, weight.shape[0]), parents, backward)


# softmax family ------------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def gather(a, index: np.ndarray, axis: int = -1) -> Tensor:
    """``take_along_axis``; ``index`` is a constant integer array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        # put_along_axis would overwrite duplicate indices
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % a.ndim] = index
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _result(out, (a,), backward)


def embed_lookup(weight, index: np.ndarray) -> Tensor:
    """Rows of ``weight`` selected by an integer array; output ``index.shape + (d,)``."""
    weight = as_tensor(weight)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= weight.shape[0]):
        raise IndexError(f"embed_lookup: index out of range for table of {weight.shape[0]} rows")
    out = weight.data[index]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _result(out, (weight,), backward)


# normalization ---------------------------------------------------------------
def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes) -> np.ndarray:
    n = int(np.prod([xhat.shape[ax] for ax in axes]))
    gsum = g.sum(axis=axes, keepdims=True)
    gx = (g * xhat).sum(axis=axes, keepdims=True)
    return inv * (g - gsum / n - xhat * gx / n)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    xhat, inv = _normalize(x.data, (x.ndim - 1,), eps)
    out = xhat
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = []
        gh = g * weight.data if weight is not None else g
        grads.append(_normalize_backward(gh, xhat, inv, (x.ndim - 1,)))
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads

    return _result(out, parents, backward)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-6) -> Tensor:
    """Group normalization for (B, C, H, W) inputs with per-channel affine."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError("group_norm (channels % groups)", x.shape, (groups,))
    xg = x.data.reshape(b, groups, c // groups, h, w)
    axes = (2, 3, 4)
    xhat_g, inv = _normalize(xg, axes, eps)
    xhat = xhat_g.reshape(x.shape)
    out = xhat
    parents = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data.reshape(1, c, 1, 1)
        parents.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, c, 1, 1)
        parents.append(bias)

    def backward(g):
        gh = g * weight.data.reshape(1, c, 1, 1) if weight is not None else g
        gx = _normalize_backward(gh.reshape(xg.shape), xhat_g, inv, axes).reshape(x.shape)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, parents, backward)


# convolution ---------------------------------------------------------------
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (B, C, H, W); ``weight``: (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    Hp, Wp = H + 2 * p, W + 2 * p
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, weight.shape)
    n = B * Ho * Wo
    # channel-major layout keeps every per-offset slab contiguous
    xc = np.pad(x.data.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((kh, kw, C, n))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xc[:, :, i:i + s * Ho:s, j:j + s * Wo:s].reshape(C, n)
    cols = cols.reshape(kh * kw * C, n)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = wmat @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def backward(g):
        gc = g.transpose(1, 0, 2, 3).reshape(O, n)
        gx = gw = None
        if weight.requires_grad:
            gw = (gc @ cols.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (wmat.T @ gc).reshape(kh, kw, C, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[i, j]
            gx = np.ascontiguousarray(gxp[:, :, p:p + H, p:p + W].transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(gc.sum(axis=1))
        return grads

    return _result(out, parents, backward)


def apply_spatial(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply constant linear maps to the last two axes: ``rows @ x @ cols.T``."""
    x = as_tensor(x)
    if x.shape[-2] != rows.shape[1] or x.shape[-1] != cols.shape[1]:
        raise ShapeError("apply_spatial", x.shape, (rows.shape[1], cols.shape[1]))
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _result(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def straight_through(z, r) -> Tensor:
    """Forward value of ``r``; the gradient flows to ``z`` unchanged."""
    z, r = as_tensor(z), as_tensor(r)
    if z.shape != r.shape:
        raise ShapeError("straight_through", z.shape, r.shape)
    return _result(r.data.copy(), (z,), lambda g: (g,))
