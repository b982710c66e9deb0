"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the active
:class:`Graph`. Nodes are stored in execution order, so the append order
is already a topological order and :func:`backward` is a single reverse
sweep over the tape.

Tensors may carry leading batch dimensions; "row" operations act on the
second-to-last axis and matrix products follow ``numpy.matmul``
broadcasting.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GraphError",
    "Graph",
    "Tensor",
    "tape",
    "no_grad",
    "current_graph",
    "backward",
    "as_tensor",
    "matmul",
    "softmax",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "abs_",
    "square",
    "gelu",
    "sum_",
    "mean",
    "concat",
    "transpose",
    "reshape",
    "broadcast_to",
    "cumsum",
    "where",
    "gather_rows",
    "scatter_rows",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, stale node, ...)."""


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Backward


@dataclass
class Graph:
    """Append-only tape of operation records."""

    nodes: list[_Node] = field(default_factory=list)

    def append(self, op: str, inputs: tuple["Tensor", ...], fn: Backward) -> int:
        self.nodes.append(_Node(op, inputs, fn))
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self) -> None:
        self.graphs: list[Graph] = [Graph()]
        self.enabled = True


_state = _State()


def current_graph() -> Graph:
    return _state.graphs[-1]


@contextlib.contextmanager
def tape() -> Iterator[Graph]:
    """Record operations on a fresh graph for the duration of the block."""
    g = Graph()
    _state.graphs.append(g)
    try:
        yield g
    finally:
        _state.graphs.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], fn: Backward) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.node_id = None
    t.graph = None
    t.requires_grad = False
    if _state.enabled and any(i.requires_grad for i in inputs):
        g = current_graph()
        t.requires_grad = True
        t.graph = g
        t.node_id = g.append(op, inputs, fn)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        # constant loss (or a bare leaf): nothing upstream to differentiate
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    g = loss.graph
    if g is None or loss.node_id >= len(g.nodes):
        raise GraphError("loss is not on an active graph (was it reset?)")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        gout = grads.pop(nid, None)
        if gout is None:
            continue
        node = g.nodes[nid]
        for inp, gin in zip(node.inputs, node.backward(gout)):
            if gin is None or not inp.requires_grad:
                continue
            if inp.node_id is not None and inp.graph is g:
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gin if prev is None else prev + gin
            elif inp.node_id is None:
                inp.grad = np.array(gin, copy=True) if inp.grad is None else inp.grad + gin


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b, row_stable: bool = False) -> Tensor:
    """Batched matrix product.

    With ``row_stable`` the forward pass avoids BLAS so that each output row
    is computed the same way regardless of how many other rows are present.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        if row_stable:
            out = np.einsum("...ik,...kj->...ij", a.data, b.data)
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _record("matmul", out, (a, b), fn)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; the mask is constant."""
    m = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "where", np.where(m, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(m, g, 0.0), sa), _unbroadcast(np.where(m, 0.0, g), sb)),
    )


# ----------------------------------------------------------------- unary ops


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)  # sign(0) == 0: zero subgradient at the kink
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _record("gelu", out, (a,), fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(
        "softmax", y, (a,),
        lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
    )


# ------------------------------------------------------------ reductions etc


def sum_(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (a,), fn)


def mean(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(a, axis: int = -2) -> Tensor:
    a = as_tensor(a)

    def fn(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record("cumsum", np.cumsum(a.data, axis=axis), (a,), fn)


def concat(tensors: Sequence, axis: int = -2) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, ts, fn)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes`` when given."""
    a = as_tensor(a)
    if axes is None:
        out = np.swapaxes(a.data, -1, -2)
        return _record("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = np.broadcast_to(a.data, tuple(shape)).copy()
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, old),))


# ------------------------------------------------------------- row indexing


def _check_rows(indices, n_rows: int, op: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"{op}: row index out of bounds for {n_rows} rows: {idx.tolist()}")
    return idx


def gather_rows(a, indices) -> Tensor:
    """Select rows (second-to-last axis). Repeated indices are allowed."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"gather_rows needs rank >= 2, got shape {a.shape}")
    idx = _check_rows(indices, a.shape[-2], "gather_rows")
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, (..., idx, slice(None)), g)
        return (out,)

    return _record("gather_rows", a.data[..., idx, :], (a,), fn)


def scatter_rows(base, rows, indices) -> Tensor:
    """Copy of ``base`` whose rows at ``indices`` are replaced by ``rows``.

    ``base`` supplies the per-row default for every index not written.
    """
    base, rows = as_tensor(base), as_tensor(rows)
    if base.ndim < 2:
        raise DimensionError(f"scatter_rows needs rank >= 2, got shape {base.shape}")
    idx = _check_rows(indices, base.shape[-2], "scatter_rows")
    if np.unique(idx).size != idx.size:
        raise IndexError(f"scatter_rows: duplicate row indices {idx.tolist()}")
    want = base.shape[:-2] + (idx.size, base.shape[-1])
    if rows.shape != want:
        raise DimensionError(f"scatter_rows: rows have shape {rows.shape}, expected {want}")
    out = base.data.copy()
    out[..., idx, :] = rows.data

    def fn(g):
        gb = g.copy()
        gb[..., idx, :] = 0.0
        return gb, g[..., idx, :]

    return _record("scatter_rows", out, (base, rows), fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "abs": abs_,
    "square": square,
    "mean": mean,
    "concat_axis": concat,
    "transpose": transpose,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
}


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name to one of the elementary tensor operations."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args, **kwargs)
