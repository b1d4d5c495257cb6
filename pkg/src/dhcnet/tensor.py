"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation produces a new :class:`Tensor` holding its
parents and a closure that maps the output gradient to parent gradients.
Node ids are drawn from a monotonically increasing counter, so sorting the
reachable nodes by id gives a valid topological order for the backward pass.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_ids = itertools.count(1)
_id_lock = threading.Lock()


def _next_id() -> int:
    with _id_lock:
        return next(_ids)


class Tensor:
    """An n-dimensional array that may participate in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "op")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = _next_id()
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None):
        return reduce("sum", self, axes)

    def mean(self, axes=None):
        return reduce("mean", self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"shapes {a} and {b} are not broadcast-compatible") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log domain error: input contains non-positive values")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # derivative at exactly 0 is 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def maximum(a, c: float) -> Tensor:
    """Elementwise ``max(a, c)`` against a scalar; ties route no gradient."""
    a = as_tensor(a)
    mask = a.data > c
    return _make(np.where(mask, a.data, c), (a,), lambda g: (g * mask,), "max_with_scalar")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt domain error: input contains negative values")
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make(out, (a,), back, "sqrt")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "max_with_scalar": maximum,
}
_UNARY = {"neg": neg, "exp": exp, "log": log, "relu": relu}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name, mirroring the primitive set of the engine."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{op_kind} needs a second operand")
        return _ELEMENTWISE[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _norm_axes(axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} is out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(op_kind: str, a, axes=None) -> Tensor:
    """Sum or mean over ``axes`` (all axes when ``None``; ``()`` is the identity)."""
    a = as_tensor(a)
    if op_kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_kind!r}")
    axes = _norm_axes(axes, a.ndim)
    if not axes:
        return _make(a.data.copy(), (a,), lambda g: (g,), op_kind)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.sum(axis=axes)
    if op_kind == "mean":
        out = out / count
    scale = 1.0 / count if op_kind == "mean" else 1.0
    keep = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g.reshape(keep) * scale, shape).copy(),)

    return _make(np.asarray(out), (a,), back, op_kind)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back, "stack")


# ---------------------------------------------------------------- backward

def tape(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` that require grad, in topological (creation) order."""
    seen: Dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        stack_.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(root: Tensor, accumulate: bool = True) -> Dict[int, np.ndarray]:
    """Propagate d(root)/d(node) through the graph.

    Returns a map ``node_id -> gradient`` for every reachable node. Leaves that
    require grad also get ``.grad`` set (added to any existing value when
    ``accumulate`` is true).
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root is detached from any differentiable graph")
    nodes = tape(root)
    grads: Dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(nodes):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    for node in nodes:
        if node.is_leaf and node.node_id in grads:
            g = grads[node.node_id]
            node.grad = g if (node.grad is None or not accumulate) else node.grad + g
    return grads


# ---------------------------------------------------------------- checking

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: ArrayLike,
    epsilon: float = 1e-6,
    skip_kinks: bool = True,
) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. Coordinates
    where ``x`` is exactly 0 are skipped when ``skip_kinks`` is set, since the
    relu/max subgradient convention is not a two-sided derivative there.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    flat = x0.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        if skip_kinks and flat[i] == 0.0:
            continue
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(f(Tensor(x0)).data.reshape(-1)[0])
        flat[i] = orig - epsilon
        fm = float(f(Tensor(x0)).data.reshape(-1)[0])
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at perturbed coordinate {i}")
        num = (fp - fm) / (2 * epsilon)
        ana = float(analytic.reshape(-1)[i])
        err = abs(ana - num) / max(1.0, abs(ana), abs(num))
        worst = max(worst, err)
    return worst


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def parameters_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-6,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Finite-difference check of ``loss_fn`` w.r.t. several parameter leaves in place.

    ``max_coords`` samples that many coordinates per parameter.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(loss_fn().data.reshape(-1)[0])
            flat[i] = orig - epsilon
            fm = float(loss_fn().data.reshape(-1)[0])
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite loss at a perturbed coordinate")
            num = (fp - fm) / (2 * epsilon)
            ana = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
    return worst
