"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node only when at least one input requires grad, so the
frozen zero-shot paths run as plain numpy. Reductions use numpy's sequential
order, which keeps runs bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn, "sub")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), fn, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), fn, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=DTYPE), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(np.asarray(out, dtype=DTYPE), (a,), fn, "mean")


# ---------------------------------------------------------------- nonlinear


def softmax(v, tau: float = 1.0, axis: int = -1) -> Tensor:
    """``exp(v/tau)`` normalized along ``axis``, max-subtracted for stability."""
    if not tau > 0:
        raise ValueError(f"softmax: temperature must be positive, got {tau}")
    v = as_tensor(v)
    z = v.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner) / tau,)

    return _node(s, (v,), fn, "softmax")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * d,)

    return _node(out, (x,), fn, "gelu")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def fn(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, n).sum(axis=0)
        dbeta = g.reshape(-1, n).sum(axis=0)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), fn, "layer_norm")


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    y = x.data / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _node(y, (x,), fn, "l2_normalize")


def l1_distance(a, b, axis: int = -1) -> Tensor:
    """Sum of absolute differences along ``axis``; subgradient 0 at ties."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    sign = np.sign(d)

    def fn(g):
        g = np.expand_dims(g, axis)
        return g * sign, -g * sign

    return _node(np.abs(d).sum(axis=axis), (a, b), fn, "l1_distance")


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, ts, fn, "concat")


def take(x, index) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back with ``np.add.at``."""
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=DTYPE)

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(out, (x,), fn, "take")


def slice_tokens(x, start: int, stop: int | None = None) -> Tensor:
    """Slice along the token axis (second to last)."""
    return take(x, (Ellipsis, slice(start, stop), slice(None)))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------- graph


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with parents before children."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if root.data.shape != ():
        raise GraphError(f"backward: root must be a scalar, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward: graph already consumed; rebuild the forward pass")
    root._consumed = True
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=DTYPE)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------- gradient checking


@dataclass
class BlockCheck:
    max_rel_err: float
    max_abs_err: float
    nonfinite: bool = False


@dataclass
class GradCheckReport:
    blocks: dict[str, BlockCheck] = field(default_factory=dict)
    eps: float = 1e-6

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks.values()), default=0.0)

    @property
    def any_nonfinite(self) -> bool:
        return any(b.nonfinite for b in self.blocks.values())

    def passed(self, tol: float = 1e-5) -> bool:
        return not self.any_nonfinite and self.max_rel_err < tol


def grad_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps named tensors to a scalar tensor. The error for each block is
    ``max |analytic - numeric| / max(1, |numeric|)``. Non-finite probes are
    flagged in the report instead of raising.
    """
    base = {k: np.array(v, dtype=DTYPE) for k, v in point.items()}
    params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    report = GradCheckReport(eps=eps)
    try:
        out = fn(params)
        out.backward()
        analytic_ok = bool(np.isfinite(out.data))
    except FloatingPointError:
        analytic_ok = False

    def probe(name: str, idx, delta: float) -> float:
        args = {k: Tensor(v) for k, v in base.items()}
        arr = base[name].copy()
        arr[idx] += delta
        args[name] = Tensor(arr)
        with np.errstate(all="ignore"):
            return float(fn(args).data)

    for name, value in base.items():
        analytic = params[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        numeric = np.zeros_like(value)
        nonfinite = not analytic_ok or not np.all(np.isfinite(analytic))
        for idx in np.ndindex(value.shape):
            hi, lo = probe(name, idx, eps), probe(name, idx, -eps)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                nonfinite = True
                continue
            numeric[idx] = (hi - lo) / (2 * eps)
        abs_err = np.abs(analytic - numeric)
        rel_err = abs_err / np.maximum(1.0, np.abs(numeric))
        report.blocks[name] = BlockCheck(
            max_rel_err=float(rel_err.max(initial=0.0)),
            max_abs_err=float(abs_err.max(initial=0.0)),
            nonfinite=nonfinite,
        )
    return report


def leaves(root: Tensor) -> Iterable[Tensor]:
    return (n for n in topological_order(root) if n.is_leaf)
