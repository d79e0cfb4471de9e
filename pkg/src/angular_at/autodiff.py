"""Small dense-tensor engine with reverse-mode differentiation.

Everything is float64 and numpy-backed. A :class:`Tensor` produced by a
primitive remembers its parents and a closure mapping the upstream gradient
to one gradient per parent. :func:`backward` walks the graph once in reverse
topological order and then frees it, so a second call on the same graph
raises instead of silently double-counting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

ARCCOS_EPS = 1e-7


class AutodiffError(Exception):
    """Base error for the tensor engine."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, where: str = "input"):
        self.op = op
        self.where = where
        super().__init__(f"{op}: non-finite {where}")


class GraphError(AutodiffError):
    """Raised for invalid backward calls (non-scalar loss, freed graph, cycle)."""


class Tensor:
    """Dense float64 array that can take part in a computation graph.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape; intermediate tensors do not keep gradients.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op: Optional[str] = None
        self._freed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    @property
    def op(self) -> Optional[str]:
        return self._op

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Constant view sharing the same buffer."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # -- operators ----------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(op)


def _make(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- binary primitives ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    _check_finite("div", a.data, b.data)
    if np.any(b.data == 0.0):
        raise NonFiniteError("div", "result (division by zero)")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make("div", out, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    _check_finite("scale", a.data, np.asarray(c))
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check_finite("matmul", a.data, b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


# -- unary primitives -----------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("relu", a.data)
    mask = a.data > 0.0  # gradient at exactly 0 is 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a.data)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    _check_finite("clamp", a.data)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _arccos_grad(u_clamped: np.ndarray) -> np.ndarray:
    return -1.0 / np.sqrt(1.0 - u_clamped * u_clamped)


def arccos(a) -> Tensor:
    """Elementwise arccos.

    Values are taken at ``clip(u, -1, 1)`` so exact unit cosines map to 0 and
    pi; the derivative is evaluated at ``clip(u, -1+1e-7, 1-1e-7)`` so it stays
    finite at the endpoints.
    """
    a = as_tensor(a)
    _check_finite("arccos", a.data)
    value = np.arccos(np.clip(a.data, -1.0, 1.0))
    u_c = np.clip(a.data, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)

    def bw(g):
        return (g * _arccos_grad(u_c),)

    return _make("arccos", value, (a,), bw)


# -- reductions -----------------------------------------------------------

def _check_axis(op: str, a: Tensor, axis) -> None:
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(op, a.shape)


def _expand(g: np.ndarray, a: Tensor, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * a.ndim), a.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def sum_(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("sum", a, axis)
    _check_finite("sum", a.data)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _make("sum", out, (a,), lambda g: (_expand(g, a, axis, keepdims).copy(),))


def mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("l2_norm", a, axis)
    _check_finite("l2_norm", a.data)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(norm > 0.0, norm, 1.0)
        return (np.where(norm > 0.0, g * a.data / safe, 0.0),)

    out = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make("l2_norm", out, (a,), bw)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("logsumexp", a, axis)
    _check_finite("logsumexp", a.data)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    lse = m + np.log(total)
    soft = shifted / total

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * soft,)

    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return _make("logsumexp", out, (a,), bw)


def max_(a, axis: int, keepdims: bool = False) -> Tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` and its argmax.

    Ties resolve to the lowest index, and only that entry receives gradient.
    """
    a = as_tensor(a)
    _check_axis("max", a, axis)
    _check_finite("max", a.data)
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    vals = np.take_along_axis(a.data, idx_k, axis=axis)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx_k, g, axis=axis)
        return (full,)

    out = vals if keepdims else np.squeeze(vals, axis=axis)
    return _make("max", out, (a,), bw), idx


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return exp(sub(a, logsumexp(a, axis=axis, keepdims=True)))


# -- backward -------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    order = []
    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if not p.requires_grad:
                continue
            s = state.get(id(p), 0)
            if s == 1:
                raise GraphError("cycle detected in computation graph")
            if s == 0:
                state[id(p)] = 1
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The graph is freed afterwards; calling again on it raises GraphError.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._freed:
        raise GraphError("backward called twice on the same graph; rebuild it with a new forward pass")
    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        if node._freed:
            raise GraphError(f"graph through '{node._op}' was already freed by a previous backward")
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    for node in order:
        if not node.is_leaf:
            node._freed = True
            node._backward = None


# -- finite differences ---------------------------------------------------

@dataclass
class GradReport:
    max_abs_error: float
    max_rel_error: float
    per_parameter_errors: Dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error < tol


def _value(loss_fn, params) -> float:
    out = loss_fn(params)
    v = out.item() if isinstance(out, Tensor) else float(out)
    if not math.isfinite(v):
        raise NonFiniteError("finite_diff_check", "loss at probe point")
    return v


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-6,
    floor: float = 1e-8,
) -> GradReport:
    """Compare backward() against central differences for every entry.

    Per parameter tensor the relative error is normwise,
    ``||a - n|| / max(||a||, ||n||, floor)``. An elementwise ratio would be
    dominated by entries whose true gradient is ~0, where the central
    difference carries ~eps*|f|/h of pure rounding noise. ``max_abs_error``
    is still the worst single entry.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    for p in params.values():
        p.zero_grad()
    loss = loss_fn(params)
    if not math.isfinite(loss.item()):
        raise NonFiniteError("finite_diff_check", "loss")
    backward(loss)

    max_abs = 0.0
    max_rel = 0.0
    per: Dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric_all = np.zeros(p.data.size)
        flat = p.data.flat
        for i in range(p.data.size):
            orig = flat[i]
            flat[i] = orig + h
            up = flat[i]
            fp = _value(loss_fn, params)
            flat[i] = orig - h
            down = flat[i]
            fm = _value(loss_fn, params)
            flat[i] = orig
            numeric_all[i] = (fp - fm) / (up - down)
        a = analytic.reshape(-1)
        diff = a - numeric_all
        if diff.size:
            max_abs = max(max_abs, float(np.max(np.abs(diff))))
        scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(numeric_all)), floor)
        worst = float(np.linalg.norm(diff)) / scale
        per[name] = worst
        max_rel = max(max_rel, worst)
    return GradReport(max_abs, max_rel, per)
