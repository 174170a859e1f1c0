"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every primitive records a node on the active :class:`Graph`.  ``backward``
walks the nodes in reverse append order, so gradient accumulation order is
fixed and replays are bit-identical.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class GraphError(RuntimeError):
    """A tensor was used with a graph that did not record it."""


_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = _state.graphs = [Graph()]
    return stack


def current_graph() -> "Graph":
    return _graph_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_state, "no_grad", 0) == 0


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    _state.no_grad = getattr(_state, "no_grad", 0) + 1
    try:
        yield
    finally:
        _state.no_grad -= 1


class Tensor:
    """Dense float64 array that can take part in a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_graph", "__weakref__")

    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name
        self._graph = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value) if self.requires_grad else None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.value)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    outputs: tuple
    inputs: tuple
    backward: Callable


@dataclass
class Graph:
    """Append-only tape of primitive applications."""

    nodes: list = field(default_factory=list)
    retain_grads: bool = True

    def __post_init__(self):
        self._tensors: dict[int, Tensor] = {}

    def record(self, output, inputs: tuple, backward: Callable) -> None:
        outputs = output if isinstance(output, tuple) else (output,)
        for out in outputs:
            out._graph = self
            self._tensors[id(out)] = out
        self.nodes.append(Node(outputs, inputs, backward if len(outputs) > 1 else _single(backward)))
        for t in inputs:
            if t.requires_grad:
                self._tensors.setdefault(id(t), t)

    def clear(self) -> None:
        """Drop all nodes and reset every grad seen by this graph to zero."""
        for t in self._tensors.values():
            t.zero_grad()
            if t._graph is self:
                t._graph = None
        self.nodes = []
        self._tensors = {}

    def release(self) -> None:
        """Drop the tape but keep accumulated grads; breaks reference cycles
        so large intermediate arrays are freed immediately."""
        for t in self._tensors.values():
            if t._graph is self:
                t._graph = None
        self.nodes = []
        self._tensors = {}

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._graph is not self:
            raise GraphError("loss was not produced on this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            gs = [grads.pop(id(out), None) for out in node.outputs]
            if all(g is None for g in gs):
                continue
            if self.retain_grads:
                for out, g in zip(node.outputs, gs):
                    if g is not None:
                        out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(node.inputs, node.backward(gs)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, g in grads.items():
            t = self._tensors[key]
            t.grad = g if t.grad is None else t.grad + g

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack[-1] is self:
            stack.pop()


def _single(fn: Callable) -> Callable:
    return lambda gs: fn(gs[0])


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d t into ``t.grad`` for every tracked tensor."""
    graph = current_graph()
    if loss._graph is not graph:
        raise GraphError("loss is not on the current graph")
    graph.backward(loss)


# ---------------------------------------------------------------------------
# primitives

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(value)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "hadamard")
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape),
                              _unbroadcast(g * a.value, b.shape)))


hadamard = mul


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operand")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        av, bv = a.value, b.value
        if bv.ndim == 2 and av.ndim >= 2:
            # shared right operand: fold leading dims into one product
            ga = np.matmul(g, bv.T) if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if bv.ndim == 1 and av.ndim >= 2:
            ga = g[..., None] * bv if a.requires_grad else None
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1) if b.requires_grad else None
            return ga, gb
        # promote vectors to matrices so one rule covers every case
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if av.ndim == 1:
            ga = ga[..., 0, :]
        if bv.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _result(value, (a, b), back)


def affine(W, x, b) -> Tensor:
    """``W x + b`` for a vector ``x`` or a stack of row vectors ``x[..., n]``."""
    W, x, b = as_tensor(W), as_tensor(x), as_tensor(b)
    if W.ndim != 2 or x.ndim < 1 or b.ndim != 1:
        raise ShapeError(f"affine: W {W.shape}, x {x.shape}, b {b.shape}")
    m, n = W.shape
    if x.shape[-1] != n or b.shape[0] != m:
        raise ShapeError(f"affine: W {W.shape} incompatible with x {x.shape} / b {b.shape}")
    return add(matmul(x, swapaxes(W, 0, 1)), b)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _result(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form cannot overflow
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _result(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _result(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def elementwise(kind: str, *args) -> Tensor:
    if kind == "sigmoid":
        (x,) = args
        return sigmoid(x)
    if kind == "tanh":
        (x,) = args
        return tanh(x)
    if kind == "hadamard":
        a, b = map(as_tensor, args)
        if a.shape != b.shape:
            raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
        return mul(a, b)
    if kind == "add":
        a, b = map(as_tensor, args)
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return add(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    value = a.value.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(value, (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(index)

    def back(g):
        out = np.zeros_like(a.value)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.value[index], (a,), back)


def take(a, idx) -> Tensor:
    """Gather rows of ``a`` along axis 0; result shape ``idx.shape + a.shape[1:]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        flat = idx.reshape(-1)
        g2 = g.reshape(len(flat), -1)
        scatter = sparse.csr_matrix((np.ones(len(flat)), (flat, np.arange(len(flat)))),
                                    shape=(a.shape[0], len(flat)))
        return ((scatter @ g2).reshape(a.shape),)

    return _result(a.value[idx], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(value, ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        value = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]}") from None

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(value, ts, back)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Cut ``a`` along ``axis`` into consecutive pieces (one tape node)."""
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to {a.shape[axis]}")
    cuts = np.cumsum(sizes)[:-1]
    values = np.split(a.value, cuts, axis=axis)
    outs = tuple(Tensor(v) for v in values)
    if grad_enabled() and a.requires_grad:
        for o in outs:
            o.requires_grad = True

        def back(gs):
            parts = [g if g is not None else np.zeros_like(v) for g, v in zip(gs, values)]
            return (np.concatenate(parts, axis=axis),)

        current_graph().record(outs, (a,), back)
    return list(outs)


def weighted_sum(weights, states) -> Tensor:
    """``sum_t weights[..., t] * states[..., t, :]``."""
    w, x = as_tensor(weights), as_tensor(states)
    if x.ndim != w.ndim + 1 or x.shape[:-1] != w.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs states {x.shape}")
    value = (w.value[..., None] * x.value).sum(axis=-2)

    def back(g):
        gw = (g[..., None, :] * x.value).sum(axis=-1) if w.requires_grad else None
        gx = w.value[..., None] * g[..., None, :] if x.requires_grad else None
        return gw, gx

    return _result(value, (w, x), back)


def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (broadcastable bool) excludes entries."""
    a = as_tensor(a)
    if a.size == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    x = _masked(a.value, mask)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.size == 0 or a.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty vector")
    x = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    s = np.exp(out)
    return _result(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and central-difference gradients.

    ``max_rel_error`` covers coordinates whose gradient magnitude is at least
    ``floor``; smaller ones are judged by ``max_abs_error`` instead.
    """

    max_rel_error: dict = field(default_factory=dict)
    max_abs_error: dict = field(default_factory=dict)
    nonfinite: dict = field(default_factory=dict)
    floor: float = 1e-3

    def passed(self, rtol: float = 1e-3, atol: float = 1e-6) -> bool:
        if any(self.nonfinite.values()):
            return False
        return (all(v <= rtol for v in self.max_rel_error.values())
                and all(v <= atol for v in self.max_abs_error.values()))

    def worst(self) -> tuple[float, float]:
        rel = max(self.max_rel_error.values(), default=0.0)
        ab = max(self.max_abs_error.values(), default=0.0)
        return rel, ab


def finite_difference_check(f: Callable[[], Tensor], params, epsilon: float = 1e-4,
                            floor: float = 1e-3, coords: int | None = None,
                            rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare backward gradients of ``f()`` with central differences.

    ``params`` is a mapping name -> Tensor or an iterable of tensors; values
    are perturbed in place and restored.  ``coords`` limits the check to a
    random sample of coordinates per parameter.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(t.name or f"p{i}", t) for i, t in enumerate(params)]

    with Graph() as graph:
        for _, t in named:
            t.zero_grad()
        loss = f()
        graph.backward(loss)
        analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
                    for name, t in named}
        graph.clear()

    report = GradCheckReport(floor=floor)
    for name, t in named:
        flat = t.value.reshape(-1)
        picks: Iterable[int] = range(flat.size)
        if coords is not None and coords < flat.size:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, coords, replace=False)
        rel = ab = 0.0
        bad = []
        a_flat = analytic[name].reshape(-1)
        for i in picks:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                fp = f().item()
                flat[i] = orig - epsilon
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                bad.append(int(i))
                continue
            a = a_flat[i]
            scale = max(abs(a), abs(num))
            if scale >= floor:
                rel = max(rel, abs(a - num) / scale)
            else:
                ab = max(ab, abs(a - num))
        report.max_rel_error[name] = rel
        report.max_abs_error[name] = ab
        report.nonfinite[name] = bad
    return report
