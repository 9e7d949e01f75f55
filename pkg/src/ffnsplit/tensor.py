"""Dense tensors with a recorded graph for reverse-mode differentiation.

Values live in numpy arrays (row-major). Every differentiable operation
records its parents and a closure mapping the output gradient to parent
gradients; :meth:`Tensor.backward` replays those closures in reverse
topological order, each node exactly once.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting introduced or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or _DEFAULT_DTYPE)
        elif dtype is None and not isinstance(data, np.ndarray):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into its gradient slot
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

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _lift(other, self)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other):
        return _lift(other, self) - self

    def __mul__(self, other):
        other = _lift(other, self)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)), "div")

    def __rtruediv__(self, other):
        return _lift(other, self) / self

    def __pow__(self, p: float):
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), backward, "getitem")

    # -- reductions / shape ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a: int, b: int):
        return Tensor._make(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")

    # -- elementwise ----------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def clamp_min(self, lo: float):
        x = self.data
        keep = x >= lo
        return Tensor._make(np.maximum(x, lo), (self,), lambda g: (g * keep,), "clamp_min")


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def parameter(data, dtype=None) -> Tensor:
    return tensor(data, requires_grad=True, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if y.ndim == 2:
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return gx, gy

    return Tensor._make(x @ y, (a, b), backward, "matmul")


def linear_forward(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y[..., j] = sum_i x[..., i] * w[i, j] + b[j]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise DimensionError(
            f"linear_forward shape mismatch: x{tuple(x.shape)} W{tuple(w.shape)}"
            + ("" if b is None else f" b{tuple(b.shape)}"))
    y = matmul(x, w)
    return y if b is None else y + b


def grouped_matmul(a: Tensor, w: Tensor) -> Tensor:
    """Per-group matmul: ``a[..., G, p] @ w[G, p, q] -> [..., G, q]``."""
    if a.shape[-2:] != w.shape[:2]:
        raise DimensionError(f"grouped_matmul shape mismatch: {a.shape} vs {w.shape}")
    lead = a.shape[:-2]
    G, p = a.shape[-2:]
    q = w.shape[2]
    xa = np.ascontiguousarray(a.data.reshape(-1, G, p).transpose(1, 0, 2))  # [G, M, p]
    y = np.matmul(xa, w.data)  # [G, M, q]

    def backward(g):
        gg = g.reshape(-1, G, q).transpose(1, 0, 2)
        ga = np.matmul(gg, np.swapaxes(w.data, 1, 2)).transpose(1, 0, 2).reshape(a.shape)
        gw = np.matmul(np.swapaxes(xa, 1, 2), gg)
        return ga, gw

    return Tensor._make(y.transpose(1, 0, 2).reshape(*lead, G, q), (a, w), backward, "grouped_matmul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp only sees non-positive arguments; numerator is 1 for x >= 0 and e for x < 0
    e = np.exp(-np.abs(x))
    return np.maximum(e, (x >= 0).astype(x.dtype)) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(h: Tensor) -> Tensor:
    x = h.data
    s = _sigmoid(x)
    return Tensor._make(x * s, (h,), lambda g: (g * (s * (1 + x * (1 - s))),), "silu")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (logits,), backward, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (logits,), backward, "log_softmax")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index[...]]`` along the last axis (one element per row)."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index shape {index.shape} vs rows {x.shape[:-1]}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return Tensor._make(out, (x,), backward, "pick")


def scatter_add_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Return a ``[n_rows, ...]`` tensor with ``src[j]`` added into row ``rows[j]``."""
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, rows, src.data)
    return Tensor._make(out, (src,), lambda g: (g[rows],), "scatter_add_rows")


def where_mask(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Entries where ``mask`` is True take ``fill``; the rest pass through."""
    keep = ~mask
    out = np.where(mask, np.asarray(fill, dtype=x.dtype), x.data)
    return Tensor._make(out, (x,), lambda g: (g * keep,), "where_mask")


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between graph gradients and central differences.

    ``loss_fn`` is re-evaluated with each parameter entry nudged in place by
    ``+eps`` and ``-eps``. The relative error of a parameter tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``; the
    function returns the maximum over tensors (0 when both are zero).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    for p in params:
        p.grad = None
    return worst
