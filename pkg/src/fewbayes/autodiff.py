"""Dense float64 tensors with reverse-mode differentiation.

The engine is define-by-run: each primitive application links its output
tensor back to its inputs, and :func:`backward` walks that implicit graph
once in reverse topological order. The primitive set is deliberately small,
just what the episodic losses are built from. Tensors are scalars
(shape ``()``), vectors ``(n,)`` or matrices ``(n, m)``; reductions accept
``axis=None`` (all entries) or ``axis=-1`` (last axis).

Gradient verification is built in: :func:`finite_diff_check` compares the
analytic gradient of any scalar-valued function against central differences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (cheap inference passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """A dense float64 array plus the bookkeeping reverse mode needs.

    ``grad`` is populated on leaves by :func:`backward`. Graph edges live in
    ``_parents``/``_backward``; they are only recorded while grad mode is on
    and at least one input requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    # Operator sugar over the same primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap arrays/lists/scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def full_like(t: Tensor, value: float) -> Tensor:
    """Constant tensor with t's shape, filled with value."""
    return Tensor(np.full(t.data.shape, float(value)))


def _node(op: str, inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    if np.isnan(out_data).any():
        raise DomainError(f"{op}: produced NaN output")
    out = Tensor(out_data)
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = inputs
        out._backward = backward_fn
        out._op = op
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _node("matmul", (a, b), ad @ bd, backward_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        return (g if na else None, g if nb else None)

    return _node("add", (a, b), a.data + b.data, backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def backward_fn(g):
        return (g if na else None, -g if nb else None)

    return _node("sub", (a, b), a.data - b.data, backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def backward_fn(g):
        return (g * bd if na else None, g * ad if nb else None)

    return _node("mul", (a, b), ad * bd, backward_fn)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward_fn(g):
        return (c * g,)

    return _node("scalar_mul", (a,), c * a.data, backward_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward_fn(g):
        return (g * out,)

    return _node("exp", (a,), out, backward_fn)


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0.0).any():
        raise DomainError("log: non-positive input")

    def backward_fn(g):
        return (g / a.data,)

    return _node("log", (a,), np.log(a.data), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _node("tanh", (a,), out, backward_fn)


def relu(a) -> Tensor:
    # Subgradient at 0 is defined as 0.
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward_fn(g):
        return (g * mask,)

    return _node("relu", (a,), np.maximum(a.data, 0.0), backward_fn)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    # d softplus / dx = sigmoid(x), written in an overflow-safe form.
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward_fn(g):
        return (g * sig,)

    return _node("softplus", (a,), out, backward_fn)


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _node("softmax", (a,), out, backward_fn)


def log_sum_exp(a, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    out_k = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    soft = np.exp(a.data - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=-1)

    def backward_fn(g):
        gg = g if keepdims else np.expand_dims(g, -1)
        return (gg * soft,)

    return _node("log_sum_exp", (a,), out, backward_fn)


def _reduce(op: str, a, axis, keepdims: bool, factor_fn) -> Tensor:
    a = as_tensor(a)
    if axis not in (None, -1):
        raise ShapeError(f"{op}: axis must be None or -1, got {axis!r}")
    shape = a.data.shape
    if axis is None:
        n = a.data.size
        out = a.data.sum() * factor_fn(n)

        def backward_fn(g):
            return (np.full(shape, float(g) * factor_fn(n)),)

    else:
        n = shape[-1] if shape else 1
        out = a.data.sum(axis=-1, keepdims=keepdims) * factor_fn(n)

        def backward_fn(g):
            gg = g if keepdims else np.expand_dims(g, -1)
            return (np.broadcast_to(gg * factor_fn(n), shape).copy(),)

    return _node(op, (a,), out, backward_fn)


def sum_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("sum", a, axis, keepdims, lambda n: 1.0)


def mean_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce("mean", a, axis, keepdims, lambda n: 1.0 / n)


def concat(*tensors) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: needs at least one input")
    nd = ts[0].data.ndim
    if nd == 0 or any(t.data.ndim != nd for t in ts):
        raise ShapeError(f"concat: ranks differ or are zero: {[t.data.shape for t in ts]}")
    if any(t.data.shape[:-1] != ts[0].data.shape[:-1] for t in ts):
        raise ShapeError(f"concat: leading dimensions differ: {[t.data.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    sizes = np.cumsum([t.data.shape[-1] for t in ts])[:-1]
    needs = [t.requires_grad for t in ts]

    def backward_fn(g):
        pieces = np.split(g, sizes, axis=-1)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _node("concat", ts, out, backward_fn)


def broadcast_add_row(mat, row) -> Tensor:
    """Add a (1, m) row vector to every row of an (n, m) matrix."""
    mat, row = as_tensor(mat), as_tensor(row)
    if mat.data.ndim != 2 or row.data.shape != (1, mat.data.shape[1]):
        raise ShapeError(
            f"broadcast_add_row: matrix {mat.data.shape} with row {row.data.shape}"
        )
    nm, nr = mat.requires_grad, row.requires_grad

    def backward_fn(g):
        return (g if nm else None, g.sum(axis=0, keepdims=True) if nr else None)

    return _node("broadcast_add_row", (mat, row), mat.data + row.data, backward_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")

    def backward_fn(g):
        return (g.T,)

    return _node("transpose", (a,), a.data.T.copy(), backward_fn)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "softmax": softmax,
    "log_sum_exp": log_sum_exp,
    "sum": sum_reduce,
    "mean": mean_reduce,
    "concat": concat,
    "broadcast_add_row": broadcast_add_row,
    "transpose": transpose,
}


def apply_primitive(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a primitive by name. Same ops as the functional forms above."""
    fn = PRIMITIVES.get(op)
    if fn is None:
        raise ContractError(f"unknown primitive '{op}'")
    return fn(*inputs, **kwargs)


# Compositions used where a division or square root of a strictly positive
# quantity is needed; they are not primitives of their own.

def sqrt_pos(a) -> Tensor:
    """sqrt(a) for strictly positive a, as exp(0.5 * log(a))."""
    return exp(scalar_mul(log(a), 0.5))


def recip_pos(a) -> Tensor:
    """1/a for strictly positive a, as exp(-log(a))."""
    return exp(scalar_mul(log(a), -1.0))


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar loss.

    Returns a map {leaf tensor -> gradient array} over every reachable leaf
    with requires_grad, and stores the same array in each leaf's ``grad``
    (overwriting, so calling twice on the same graph yields identical
    gradients). A loss with no differentiable inputs yields an empty map.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return {}

    # Iterative topological order over requires_grad nodes only.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return leaves


def _scalar_value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def finite_diff_check(f: Callable, params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return a scalar (Tensor or float) and be deterministic:
    any randomness inside must be replayed from a fixed seed on every call.
    The error for one entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    Non-differentiable points (a relu or |.| kink within h of a parameter
    value) are unsupported inputs: the central difference straddles the kink
    and the reported error is meaningless there.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    loss = f(params)
    if not isinstance(loss, Tensor):
        raise ContractError("finite_diff_check: f must return a Tensor for the analytic pass")
    grad_map = backward(loss)

    max_err = 0.0
    for p in params:
        g_ad = grad_map.get(p)
        flat_g = np.zeros(p.data.size) if g_ad is None else g_ad.reshape(-1)
        flat_w = p.data.reshape(-1)
        for i in range(flat_w.size):
            orig = flat_w[i]
            with no_grad():
                flat_w[i] = orig + h
                f_plus = _scalar_value(f(params))
                flat_w[i] = orig - h
                f_minus = _scalar_value(f(params))
            flat_w[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(flat_g[i] - g_fd) / max(1.0, abs(flat_g[i]), abs(g_fd))
            max_err = max(max_err, float(err))
    return max_err
