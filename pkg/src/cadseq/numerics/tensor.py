"""A small dense-array engine with a dynamic reverse-mode tape.

Every op returns a new :class:`Tensor`. When any input requires grad, the result
remembers its parents and a closure mapping the output gradient to input gradients;
:meth:`Tensor.backward` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

_state = {"dtype": np.float32, "check_finite": True, "grad": True}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    _state["dtype"] = np.dtype(dtype).type


@contextlib.contextmanager
def precision(name: str):
    """``with precision("f64"): ...`` switches the default float type temporarily."""
    dtype = {"f32": np.float32, "f64": np.float64}[name]
    old = _state["dtype"]
    _state["dtype"] = dtype
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Inside the block ops record no tape, so intermediates are freed as soon as possible."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


def set_check_finite(flag: bool) -> None:
    _state["check_finite"] = bool(flag)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    if _state["check_finite"]:
        for a in arrays:
            # min and max propagate nan and expose +-inf without allocating a mask
            if a.size and not (np.isfinite(a.min()) and np.isfinite(a.max())):
                raise NonFiniteError(f"{op}: non-finite input")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # -- basics
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

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- reverse pass
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


ArrayLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result; ``backward(g)`` must return one gradient (or None) per parent."""
    out = Tensor(data, dtype=data.dtype)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    _check_finite("add", a.data, b.data)
    return custom_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    _check_finite("sub", a.data, b.data)
    return custom_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    _check_finite("mul", a.data, b.data)
    return custom_op(
        a.data * b.data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.data, b.data)
    _check_finite("div", a.data, b.data)
    out = a.data / b.data
    return custom_op(
        out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))
    )


def _unary(name: str, x: ArrayLike, fwd, dfdx) -> Tensor:
    x = as_tensor(x)
    _check_finite(name, x.data)
    y = fwd(x.data)
    return custom_op(y, (x,), lambda g: (g * dfdx(x.data, y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.abs(x)
    np.negative(e, out=e)
    np.exp(e, out=e)
    out = e + 1.0
    np.reciprocal(out, out=out)
    np.multiply(out, e, out=out, where=x < 0)
    return out.astype(x.dtype, copy=False)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype)


def sigmoid(x: ArrayLike) -> Tensor:
    return _unary("sigmoid", x, _sigmoid, lambda x, y: y * (1 - y))


def softplus(x: ArrayLike) -> Tensor:
    return _unary("softplus", x, _softplus, lambda x, y: _sigmoid(x))


def exp(x: ArrayLike) -> Tensor:
    return _unary("exp", x, np.exp, lambda x, y: y)


def tanh(x: ArrayLike) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda x, y: 1 - y * y)


def silu(x: ArrayLike) -> Tensor:
    def d(x, y):
        s = _sigmoid(x)
        return s * (1 + x * (1 - s))

    return _unary("silu", x, lambda x: x * _sigmoid(x), d)


def square(x: ArrayLike) -> Tensor:
    return _unary("square", x, np.square, lambda x, y: 2 * x)


# ---------------------------------------------------------------------------
# shape / reduction


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def back(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return custom_op(x.data[idx], (x,), back)


def concat(xs: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return custom_op(data, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """``a @ b`` over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("matmul", a.data, b.data)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return custom_op(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------------------
# neural-network ops


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return custom_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("log_softmax", x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return custom_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def rms_norm(x: ArrayLike, gain: Optional[ArrayLike] = None, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps)`` over the last axis, times an optional gain."""
    x = as_tensor(x)
    _check_finite("rms_norm", x.data)
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data * inv
    d = x.shape[-1]

    def back(g):
        return (inv * (g - y * (g * y).sum(axis=-1, keepdims=True) / d),)

    out = custom_op(y.astype(x.dtype), (x,), back)
    return out if gain is None else mul(out, gain)


def depthwise_conv1d(x: ArrayLike, w: ArrayLike) -> Tensor:
    """Causal per-channel convolution: ``y[k] = sum_j w[j] * x[k - j]``.

    ``x`` is (..., L, C), ``w`` is (K, C); positions before the start read zeros.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or w.shape[1] != x.shape[-1]:
        raise ShapeError(f"depthwise_conv1d: incompatible shapes {x.shape} and {w.shape}")
    _check_finite("depthwise_conv1d", x.data, w.data)
    K, L = w.shape[0], x.shape[-2]
    y = np.zeros_like(x.data)
    for j in range(min(K, L)):
        y[..., j:, :] += w.data[j] * x.data[..., : L - j, :]

    def back(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for j in range(min(K, L)):
            gx[..., : L - j, :] += w.data[j] * g[..., j:, :]
            gw[j] = (g[..., j:, :] * x.data[..., : L - j, :]).reshape(-1, x.shape[-1]).sum(0)
        return gx, gw

    return custom_op(y, (x, w), back)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index outside table of {table.shape[0]} rows")

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return custom_op(table.data[idx], (table,), back)


def mse(pred: ArrayLike, target: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over entries; ``mask`` (broadcastable) selects entries."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred - target
    if mask is None:
        return mean(diff * diff)
    m = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    count = max(float(m.sum()), 1.0)
    return tsum(diff * diff * m) * (1.0 / count)


def cross_entropy(logits: ArrayLike, targets, mask: Optional[np.ndarray] = None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(``logits``) over the last axis.

    ``mask`` may hold non-negative per-position weights. ``reduction="none"`` returns
    per-position losses (masked positions are zero).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    _check_finite("cross_entropy", logits.data)
    m = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0] * m
    if reduction == "none":
        scale = np.ones_like(m)
        data = nll
    elif reduction == "mean":
        scale = np.full_like(m, 1.0 / max(float(m.sum()), 1.0))
        data = np.asarray(nll.sum() * scale.flat[0] if m.size else 0.0, dtype=logits.dtype)
    elif reduction == "sum":
        scale = np.ones_like(m)
        data = np.asarray(nll.sum(), dtype=logits.dtype)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (g * scale * m)[..., None],)

    return custom_op(data, (logits,), back)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)))
