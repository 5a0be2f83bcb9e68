"""Dense f64 tensors with a tape-based reverse-mode autodiff.

Operations are free functions. When a :class:`Graph` is active (``with Graph()
as g:``) any operation touching a tracked tensor or a trainable
:class:`Parameter` is appended to the tape; outside a graph the same calls are
plain numpy evaluations. Nodes are numbered in creation order, which is also a
valid topological order, so ``backward`` is a single reverse sweep.
"""

from __future__ import annotations

import builtins
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Graph",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "FlopCounter",
    "counting_flops",
    "flop_stage",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scalar_mul",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "take",
    "index",
    "matmul",
    "einsum",
    "softmax_lastdim",
    "conv2d",
    "layer_norm_channels",
    "upsample_nearest2x",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape."""


_state = threading.local()


def _current_graph() -> Graph | None:
    return getattr(_state, "graph", None)


class Tensor:
    """A row-major float64 array, optionally attached to a graph node."""

    __array_priority__ = 100

    def __init__(self, data, graph: Graph | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """A named trainable leaf.

    Parameters live outside any graph; each graph that uses one registers it
    as a leaf on first touch. ``frozen`` parameters are treated as constants.
    """

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data, dtype=np.float64))
        self.name = name
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    parents: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    op: str


class Graph:
    """Append-only tape of operations.

    Use as a context manager to make it the active graph for the current
    thread. Distinct threads may each hold their own active graph.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._param_nodes: dict[int, int] = {}
        self._param_refs: list[Parameter] = []
        self._prev: list[Graph | None] = []

    def __enter__(self) -> Graph:
        self._prev.append(_current_graph())
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, parents, vjp, shape, op) -> int:
        self.nodes.append(_Node(tuple(parents), vjp, tuple(shape), op))
        return len(self.nodes) - 1

    def leaf(self, data, name: str = "leaf") -> Tensor:
        """Register ``data`` as a differentiable input on this graph."""
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        node = self._push((), None, arr.shape, name)
        return Tensor(arr, self, node)

    def param_node(self, p: Parameter) -> int:
        key = id(p)
        if key not in self._param_nodes:
            self._param_nodes[key] = self._push((), None, p.shape, f"param:{p.name}")
            # keep the parameter alive so id() stays unique for the graph's lifetime
            self._param_refs.append(p)
        return self._param_nodes[key]

    def node_of(self, t: Tensor) -> int | None:
        if isinstance(t, Parameter):
            return None if t.frozen else self.param_node(t)
        if t.node is None:
            return None
        if t.graph is not self:
            raise GraphError("tensor belongs to a different graph")
        return t.node

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse sweep from a scalar ``loss``; returns per-node gradients."""
        if loss.data.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        if loss.graph is not self or loss.node is None:
            raise GraphError("loss is not recorded on this graph")
        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for i in range(loss.node, -1, -1):
            node = self.nodes[i]
            g = grads.get(i)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                prev = grads.get(parent)
                grads[parent] = pg if prev is None else prev + pg
        return Gradients(self, grads)


class Gradients:
    """Gradient lookup produced by :meth:`Graph.backward`."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if isinstance(t, Parameter):
            node = self._graph._param_nodes.get(id(t))
        elif t.graph is self._graph:
            node = t.node
        else:
            node = None
        if node is None:
            return np.zeros(t.shape)
        g = self._grads.get(node)
        return np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)


# ---------------------------------------------------------------------------
# flop accounting


@dataclass
class FlopCounter:
    """Multiply-add tally keyed by stage label."""

    by_stage: dict[str, int] = field(default_factory=dict)

    def add(self, stage: str, n: int) -> None:
        self.by_stage[stage] = self.by_stage.get(stage, 0) + int(n)

    @property
    def multiply_adds(self) -> int:
        return builtins.sum(self.by_stage.values())

    def __getitem__(self, stage: str) -> int:
        return self.by_stage.get(stage, 0)


@contextmanager
def counting_flops(counter: FlopCounter | None = None) -> Iterator[FlopCounter]:
    counter = counter if counter is not None else FlopCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def flop_stage(name: str) -> Iterator[None]:
    prev = getattr(_state, "stage", "other")
    _state.stage = name
    try:
        yield
    finally:
        _state.stage = prev


def _count(n: int) -> None:
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.add(getattr(_state, "stage", "other"), n)


# ---------------------------------------------------------------------------
# plumbing


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a forward result; record on the active graph if any input is tracked."""
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, op)
    g = _current_graph()
    if g is None:
        for t in inputs:
            if t.node is not None:
                raise GraphError(f"{op}: tracked tensor used outside its graph context")
        return Tensor(out)
    parents = [g.node_of(t) for t in inputs]
    if all(p is None for p in parents):
        return Tensor(out)
    out.flags.writeable = False
    return Tensor(out, g, g._push(parents, vjp, out.shape, op))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make("div", ad / bd, (a, b), vjp)


def neg(a) -> Tensor:
    a = tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scalar_mul(a, c: float) -> Tensor:
    a = tensor(a)
    c = float(c)
    return _make("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a) -> Tensor:
    a = tensor(a)
    x = a.data
    if (x <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value was inside."""
    a = tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def take(a, indices, axis: int) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (indices may repeat)."""
    a = tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    axis = axis % a.ndim

    def vjp(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (out,)

    return _make("take", np.take(a.data, idx, axis=axis), (a,), vjp)


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return _make("index", np.array(a.data[key]), (a,), vjp)


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    _count(math.prod(a.shape) * b.shape[-1])

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", ad @ bd, (a, b), vjp)


# Joint index spaces below this size go straight to c_einsum; planning costs more than it saves.
_EINSUM_PLAN_THRESHOLD = 1 << 20


def _raw_einsum(spec: str, a: np.ndarray, b: np.ndarray, work: int) -> np.ndarray:
    return np.einsum(spec, a, b, optimize=work >= _EINSUM_PLAN_THRESHOLD)


def _einsum_grad(g, out_sub, other_sub, other, target_sub, target_shape, work):
    keep = "".join(c for c in target_sub if c in out_sub or c in other_sub)
    partial = _raw_einsum(f"{out_sub},{other_sub}->{keep}", g, other, work)
    if keep != target_sub:
        expanded = partial.reshape([target_shape[i] if c in keep else 1 for i, c in enumerate(target_sub)])
        partial = np.broadcast_to(expanded, target_shape).copy()
    return partial


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand.

    Counts one multiply-add per point of the joint index space.
    """
    a, b = tensor(a), tensor(b)
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, t in ((sa, a), (sb, b)):
        if len(set(s)) != len(s) or len(s) != t.ndim:
            raise ShapeError(f"einsum: subscripts {s!r} do not fit shape {t.shape}")
    extents: dict[str, int] = {}
    for s, t in ((sa, a), (sb, b)):
        for c, n in zip(s, t.shape):
            if extents.setdefault(c, n) != n:
                raise ShapeError(f"einsum {spec}: extent mismatch on {c!r} for shapes {a.shape} and {b.shape}")
    work = math.prod(extents.values())
    _count(work)
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _einsum_grad(g, out_sub, sb, bd, sa, ad.shape, work),
            _einsum_grad(g, out_sub, sa, ad, sb, bd.shape, work),
        )

    return _make("einsum", _raw_einsum(spec, ad, bd, work), (a, b), vjp)


def softmax_lastdim(a) -> Tensor:
    a = tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (a,), vjp)


# ---------------------------------------------------------------------------
# image ops


def _same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x[C_in,H,W]`` with ``weight[C_out,C_in,k,k]``, same padding.

    Output extents are ``ceil(H/stride)`` by ``ceil(W/stride)``; when the
    padding total is odd the extra row/column goes to the bottom/right.
    """
    x, weight = tensor(x), tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: expected x[C,H,W] and w[O,C,k,k], got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc, k, _ = weight.shape
    if wc != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but weights expect {wc}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    ho, pt, pb = _same_padding(h, k, stride)
    wo, pl, pr = _same_padding(w, k, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    taps = [
        (slice(None), slice(u, u + stride * (ho - 1) + 1, stride), slice(v, v + stride * (wo - 1) + 1, stride))
        for u in range(k)
        for v in range(k)
    ]
    # im2col rows ordered (c, u, v) to match weight.reshape(c_out, -1)
    cols = np.stack([xp[t] for t in taps], axis=1).reshape(c_in * k * k, ho * wo)
    wm = weight.data.reshape(c_out, -1)
    out = (wm @ cols).reshape(c_out, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out += bias.data[:, None, None]
        inputs.append(bias)
    wshape = weight.shape

    def vjp(g):
        g2 = g.reshape(c_out, ho * wo)
        dw = (g2 @ cols.T).reshape(wshape)
        dcols = (wm.T @ g2).reshape(c_in, k * k, ho, wo)
        dxp = np.zeros_like(xp)
        for i, t in enumerate(taps):
            dxp[t] += dcols[:, i]
        grads = [dxp[:, pt : pt + h, pl : pl + w], dw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _make("conv2d", out, inputs, vjp)


LAYER_NORM_EPS = 1e-5


def layer_norm_channels(x, gain=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the channel vector at every spatial position of ``x[C,H,W]``."""
    x = tensor(x)
    if x.ndim != 3 or x.shape[0] < 1:
        raise ShapeError(f"layer_norm_channels: expected x[C,H,W], got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=0, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
    xhat = centered * inv

    def vjp(g):
        return (inv * (g - g.mean(axis=0, keepdims=True) - xhat * (g * xhat).mean(axis=0, keepdims=True)),)

    y = _make("layer_norm", xhat, (x,), vjp)
    if gain is not None:
        y = mul(y, reshape(gain, (-1, 1, 1)))
    if bias is not None:
        y = add(y, reshape(bias, (-1, 1, 1)))
    return y


def upsample_nearest2x(x) -> Tensor:
    """Double the last two axes by pixel replication."""
    x = tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = x.shape

    def vjp(g):
        g = g.reshape(*shape[:-2], shape[-2], 2, shape[-1], 2)
        return (g.sum(axis=(-3, -1)),)

    return _make("upsample", out, (x,), vjp)
