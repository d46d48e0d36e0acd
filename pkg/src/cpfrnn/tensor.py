"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations executed inside an active :class:`Graph` are appended to its tape
in execution order, so reverse iteration over the tape is a valid topological
order for back-propagation.  Outside a graph, operations only compute values.

    >>> w = Tensor([0.0], requires_grad=True)
    >>> with Graph() as g:
    ...     y = sigmoid(w * 1.0).sum()
    ...     grads = backward(y)
    >>> float(grads[w][0])
    0.25
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE: contextvars.ContextVar[Graph | None] = contextvars.ContextVar("cpfrnn_graph", default=None)


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "graph", "name")
    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


@dataclass
class Graph:
    """Append-only tape of recorded operations for one forward/backward pass."""

    nodes: list[Node] = field(default_factory=list)
    _leaves: dict[int, int] = field(default_factory=dict)
    _token: contextvars.Token | None = None

    def __enter__(self) -> Graph:
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _node_of(self, t: Tensor) -> int | None:
        if t.graph is self and t.node is not None:
            return t.node
        if not t.requires_grad:
            return None
        key = id(t)
        nid = self._leaves.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t.data))
            self._leaves[key] = nid
        return nid

    def leaf_id(self, t: Tensor) -> int | None:
        if t.graph is self and t.node is not None:
            return t.node
        return self._leaves.get(id(t))


def active_graph() -> Graph | None:
    return _ACTIVE.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.node = None
    out.graph = None
    out.name = None
    g = _ACTIVE.get()
    if g is None:
        return out
    ids = tuple(g._node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return out
    out.node = len(g.nodes)
    out.graph = g
    g.nodes.append(Node(op, ids, value, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    da, db = a.data, b.data
    return _record("mul", da * db, (a, b),
                   lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    da, db = a.data, b.data
    out = da / db
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / db, da.shape),
                              _unbroadcast(-g * out / db, db.shape)))


def affine(a, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * a + shift`` for python scalars."""
    a = _as_tensor(a)
    return _record("affine", a.data * scale + shift, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# elementwise unary


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the clip is active."""
    a = _as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _record("clamp", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules (vectors promoted as usual)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    da, db = a.data, b.data

    def backward(g):
        A = da[None, :] if da.ndim == 1 else da
        B = db[:, None] if db.ndim == 1 else db
        G = g
        if da.ndim == 1:
            G = np.expand_dims(G, -2)
        if db.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        if da.ndim == 1:
            ga = np.squeeze(ga, -2)
        if db.ndim == 1:
            gb = np.squeeze(gb, -1)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _record("matmul", out, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    return _record("transpose", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(items: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in items]
    if not ts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def index(a, key) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    a = _as_tensor(a)
    out = a.data[key]
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return _record("index", np.array(out), (a,), backward)


def gather(a, idx: np.ndarray, axis: int) -> Tensor:
    """``take_along_axis``; ``idx`` is a constant (its selection is not differentiated)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != a.ndim:
        raise ShapeError(f"gather: index rank {idx.ndim} differs from operand rank {a.ndim}")
    axis = axis % a.ndim
    out = np.take_along_axis(a.data, idx, axis=axis)
    src = a.shape

    def backward(g):
        pos = []
        for d in range(len(src)):
            if d == axis:
                pos.append(idx)
            else:
                shp = [1] * len(src)
                shp[d] = src[d]
                pos.append(np.arange(src[d]).reshape(shp))
        flat = np.ravel_multi_index(tuple(np.broadcast_arrays(*pos, g)[:-1]), src)
        size = int(np.prod(src))
        return (np.bincount(flat.ravel(), weights=g.ravel(), minlength=size).reshape(src),)

    return _record("gather", out, (a,), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant ``mask`` holds, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(mask, a.data, b.data)
    return _record("where", out, (a, b),
                   lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                              _unbroadcast(np.where(mask, 0.0, g), sb)))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, src_shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, src_shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _record("sum", np.asarray(out), (a,), lambda g: (_expand(g, src, axes, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over axes {axes} of shape {a.shape}")
    src = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _record("mean", np.asarray(out), (a,),
                   lambda g: (_expand(g, src, axes, keepdims) / count,))


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    out = np.cumsum(a.data, axis=axis)
    return _record("cumsum", out, (a,),
                   lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError(f"logsumexp: empty axis {axis} of shape {a.shape}")
    x = a.data
    m = np.max(x, axis=axes, keepdims=True)
    s = np.sum(np.exp(x - m), axis=axes, keepdims=True)
    out_k = m + np.log(s)
    weights = np.exp(x - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    src = a.shape
    return _record("logsumexp", out, (a,),
                   lambda g: (_expand(g, src, axes, keepdims) * weights,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} of shape {a.shape}")
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), backward)


# ---------------------------------------------------------------------------
# differentiation


class Gradients(dict):
    """Node-id keyed gradients that can also be looked up by tensor."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        super().__init__(grads)
        self.graph = graph

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            nid = self.graph.leaf_id(key)
            if nid is None:
                return np.zeros(key.shape)
            key = nid
        return super().__getitem__(key)


def backward(seed: Tensor, graph: Graph | None = None) -> Gradients:
    """Gradient of the scalar ``seed`` with respect to every node of its graph."""
    graph = graph or seed.graph or _ACTIVE.get()
    if seed.data.size != 1:
        raise ShapeError(f"backward: seed must be a scalar, got shape {seed.shape}")
    if graph is None:
        raise ValueError("backward: seed was not computed inside a graph")
    nodes = graph.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    if seed.graph is graph and seed.node is not None:
        grads[seed.node] = np.ones(nodes[seed.node].value.shape)
        for nid in range(seed.node, -1, -1):
            g = grads[nid]
            node = nodes[nid]
            if g is None or node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if inp is None or gi is None:
                    continue
                if grads[inp] is None:
                    grads[inp] = gi
                else:
                    grads[inp] = grads[inp] + gi
    out = {i: (g if g is not None else np.zeros(nodes[i].value.shape)) for i, g in enumerate(grads)}
    return Gradients(graph, out)


def grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn(*inputs)`` in a fresh graph and return (value, gradients)."""
    with Graph() as g:
        flagged = []
        for t in inputs:
            flagged.append(t.requires_grad)
            t.requires_grad = True
        try:
            out = fn(*inputs)
            grads = backward(out, g)
        finally:
            for t, f in zip(inputs, flagged):
                t.requires_grad = f
    return out.item(), [np.array(grads[t]) for t in inputs]


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: tuple[int, int] | None
    nonfinite: list[tuple[int, int]]

    def __float__(self) -> float:
        return self.max_rel_error


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> GradcheckResult:
    """Compare reverse-mode gradients to central differences component by component.

    Relative error uses ``|a - b| / max(|a|, |b|, 1e-8)``.  Components whose
    perturbed evaluations are non-finite are listed in ``nonfinite`` and count
    as infinite error.
    """
    if step <= 0:
        raise ValueError(f"gradcheck: step must be positive, got {step}")
    _, analytic = grad(fn, inputs)
    worst, where_ = 0.0, None
    bad = []
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        ga = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fn(*inputs).item()
            flat[j] = orig - step
            fm = fn(*inputs).item()
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                bad.append((i, j))
                worst, where_ = np.inf, (i, j)
                continue
            num = (fp - fm) / (2.0 * step)
            rel = abs(num - ga[j]) / max(abs(num), abs(ga[j]), 1e-8)
            if rel > worst:
                worst, where_ = rel, (i, j)
    return GradcheckResult(float(worst), where_, bad)


def parameters_of(items: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in items if t.requires_grad]
