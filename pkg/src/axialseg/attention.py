"""Full 2D, axial and gated axial self-attention on ``[C, H, W]`` feature maps.

All variants share the same pointwise projections (``w_q``, ``w_k``, ``w_v``,
``w_out``; no biases) and the same relative-position convention: a table of
``2L - 1`` vectors per head indexed by ``key_pos - query_pos + L - 1``.
Logits are not scaled by ``1/sqrt(d)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Graph, Parameter, ShapeError, Tensor

RELPOS_INIT = 0.1


class Axis(enum.Enum):
    HEIGHT = "height"
    WIDTH = "width"


class _Init:
    """Deterministic parameter factory: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""

    def __init__(self, rng: np.random.Generator, prefix: str = ""):
        self.rng = rng
        self.prefix = prefix

    def child(self, name: str) -> _Init:
        return _Init(self.rng, f"{self.prefix}{name}.")

    def uniform(self, name: str, shape, bound: float) -> Parameter:
        return Parameter(self.rng.uniform(-bound, bound, size=shape), f"{self.prefix}{name}")

    def fan_in(self, name: str, shape, fan_in: int) -> Parameter:
        return self.uniform(name, shape, 1.0 / np.sqrt(fan_in))

    def const(self, name: str, shape, value: float) -> Parameter:
        return Parameter(np.full(shape, value, dtype=np.float64), f"{self.prefix}{name}")


@dataclass
class RelPosTable:
    """Per-head offset tables for query, key and value, each ``[heads, 2L-1, d_head]``."""

    r_q: Parameter
    r_k: Parameter
    r_v: Parameter

    @property
    def length(self) -> int:
        return (self.r_q.shape[1] + 1) // 2

    def parameters(self) -> list[Parameter]:
        return [self.r_q, self.r_k, self.r_v]

    @classmethod
    def init(cls, init: _Init, heads: int, length: int, d_head: int) -> RelPosTable:
        shape = (heads, 2 * length - 1, d_head)
        return cls(*(init.uniform(n, shape, RELPOS_INIT) for n in ("r_q", "r_k", "r_v")))

    def zero(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


@dataclass
class Gates:
    """Scalar gates on the query, key and value positional terms."""

    g_q: Parameter
    g_k: Parameter
    g_v: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.g_q, self.g_k, self.g_v]

    def set(self, value: float) -> None:
        for p in self.parameters():
            p.data = np.array(float(value))


def relative_index(length: int) -> np.ndarray:
    """``idx[query, key] = key - query + length - 1``."""
    pos = np.arange(length)
    return pos[None, :] - pos[:, None] + length - 1


def _lookup(table: Parameter, length: int) -> Tensor:
    """Expand ``[heads, 2L-1, d]`` to ``[heads, L_query, L_key, d]``."""
    if table.shape[1] != 2 * length - 1:
        raise ShapeError(f"relative table {table.name!r} has {table.shape[1]} slots, expected {2 * length - 1}")
    return T.take(table, relative_index(length), axis=1)


class _Projected:
    """Shared projection weights for every attention layer."""

    d_model: int
    heads: int
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_out: Parameter

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def _init_projections(self, init: _Init) -> None:
        shape = (self.d_model, self.d_model)
        self.w_q, self.w_k, self.w_v, self.w_out = (init.fan_in(n, shape, self.d_model) for n in ("w_q", "w_k", "w_v", "w_out"))

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[0] != self.d_model:
            raise ShapeError(f"expected input [{self.d_model}, H, W], got {tuple(x.shape)}")

    def _qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        with T.flop_stage("projection"):
            q, k, v = (split_heads(pointwise(w, x), self.heads) for w in (self.w_q, self.w_k, self.w_v))
        return q, k, v

    def _output(self, y: Tensor) -> Tensor:
        with T.flop_stage("projection"):
            return pointwise(self.w_out, merge_heads(y))


def pointwise(weight: Tensor, x: Tensor) -> Tensor:
    """1x1 projection: ``out[o,h,w] = sum_c weight[o,c] x[c,h,w]``."""
    return T.einsum("oc,chw->ohw", weight, x)


def split_heads(x, heads: int) -> Tensor:
    """``[C, H, W] -> [heads, C/heads, H, W]``; head ``n`` owns channels ``n*d .. n*d+d-1``."""
    x = T.tensor(x)
    c = x.shape[0]
    if heads < 1 or c % heads:
        raise ShapeError(f"{c} channels cannot be split into {heads} heads")
    return T.reshape(x, (heads, c // heads) + tuple(x.shape[1:]))


def merge_heads(x) -> Tensor:
    x = T.tensor(x)
    return T.reshape(x, (x.shape[0] * x.shape[1],) + tuple(x.shape[2:]))


# ---------------------------------------------------------------------------
# axial attention


# Subscripts per axis. n=head, d=channel, a=query pos, b=key pos; the
# remaining spatial letter is the fixed row/column.
_AXIAL_SUBS = {
    Axis.HEIGHT: dict(q="ndaj", k="ndbj", logits="njab"),
    Axis.WIDTH: dict(q="ndia", k="ndib", logits="niab"),
}


@dataclass(eq=False)
class AxialAttentionLayer(_Projected):
    axis: Axis
    d_model: int
    heads: int
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_out: Parameter
    relpos: RelPosTable | None = None
    gates: Gates | None = None

    @property
    def gated(self) -> bool:
        return self.gates is not None

    @classmethod
    def init(
        cls,
        axis: Axis,
        d_model: int,
        heads: int,
        length: int,
        rng: np.random.Generator,
        gated: bool = False,
        relpos: bool = True,
        prefix: str = "",
    ) -> AxialAttentionLayer:
        if heads < 1 or d_model % heads:
            raise ShapeError(f"d_model={d_model} is not divisible by heads={heads}")
        init = _Init(rng, prefix)
        layer = cls.__new__(cls)
        layer.axis, layer.d_model, layer.heads = Axis(axis), d_model, heads
        layer._init_projections(init)
        layer.relpos = RelPosTable.init(init.child("relpos"), heads, length, d_model // heads) if relpos else None
        # gates draw nothing from rng, so gated and ungated layers share every other value
        layer.gates = Gates(*(init.const(n, (), 1.0) for n in ("gate_q", "gate_k", "gate_v"))) if gated else None
        return layer

    def parameters(self) -> list[Parameter]:
        params = [self.w_q, self.w_k, self.w_v, self.w_out]
        if self.relpos is not None:
            params += self.relpos.parameters()
        if self.gates is not None:
            params += self.gates.parameters()
        return params

    def __call__(self, x) -> Tensor:
        return gated_axial_attention(x, self) if self.gated else axial_attention(x, self)


def _axial(x: Tensor, layer: AxialAttentionLayer, gates: Gates | None) -> Tensor:
    x = T.tensor(x)
    layer._check_input(x)
    subs = _AXIAL_SUBS[layer.axis]
    length = x.shape[1] if layer.axis is Axis.HEIGHT else x.shape[2]
    q, k, v = layer._qkv(x)
    q_s, k_s, lg = subs["q"], subs["k"], subs["logits"]
    rel = "nabd"
    with T.flop_stage("score"):
        logits = T.einsum(f"{q_s},{k_s}->{lg}", q, k)
    if layer.relpos is not None:
        with T.flop_stage("positional"):
            qr = T.einsum(f"{q_s},{rel}->{lg}", q, _lookup(layer.relpos.r_q, length))
            kr = T.einsum(f"{k_s},{rel}->{lg}", k, _lookup(layer.relpos.r_k, length))
        if gates is not None:
            qr, kr = T.mul(gates.g_q, qr), T.mul(gates.g_k, kr)
        logits = T.add(T.add(logits, qr), kr)
    attn = T.softmax_lastdim(logits)
    with T.flop_stage("score"):
        y = T.einsum(f"{lg},{k_s}->{q_s}", attn, v)
    if layer.relpos is not None:
        with T.flop_stage("positional"):
            yr = T.einsum(f"{lg},{rel}->{q_s}", attn, _lookup(layer.relpos.r_v, length))
        if gates is not None:
            yr = T.mul(gates.g_v, yr)
        y = T.add(y, yr)
    return layer._output(y)


def axial_attention(x, layer: AxialAttentionLayer) -> Tensor:
    """1D attention along ``layer.axis`` with relative-position terms when present.

    Height: ``y_ij = sum_h softmax_h(q_ij.k_hj + q_ij.rq[h-i] + k_hj.rk[h-i]) (v_hj + rv[h-i])``;
    Width is the same along ``w`` with offsets ``w - j``.
    """
    return _axial(x, layer, None)


def gated_axial_attention(x, layer: AxialAttentionLayer) -> Tensor:
    """Axial attention whose three positional terms are scaled by learnable scalars."""
    if layer.gates is None:
        raise ValueError("gated_axial_attention requires a layer built with gated=True")
    if layer.relpos is None:
        raise ValueError("gated_axial_attention requires relative-position tables")
    return _axial(x, layer, layer.gates)


# ---------------------------------------------------------------------------
# full 2D attention


@dataclass(eq=False)
class Full2DAttentionLayer(_Projected):
    d_model: int
    heads: int
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_out: Parameter
    relpos_h: RelPosTable | None = None
    relpos_w: RelPosTable | None = None

    @classmethod
    def init(
        cls,
        d_model: int,
        heads: int,
        height: int,
        width: int,
        rng: np.random.Generator,
        relpos: bool = True,
        prefix: str = "",
    ) -> Full2DAttentionLayer:
        if heads < 1 or d_model % heads:
            raise ShapeError(f"d_model={d_model} is not divisible by heads={heads}")
        init = _Init(rng, prefix)
        layer = cls.__new__(cls)
        layer.d_model, layer.heads = d_model, heads
        layer._init_projections(init)
        if relpos:
            layer.relpos_h = RelPosTable.init(init.child("relpos_h"), heads, height, d_model // heads)
            layer.relpos_w = RelPosTable.init(init.child("relpos_w"), heads, width, d_model // heads)
        else:
            layer.relpos_h = layer.relpos_w = None
        return layer

    @property
    def has_relpos(self) -> bool:
        return self.relpos_h is not None and self.relpos_w is not None

    def parameters(self) -> list[Parameter]:
        params = [self.w_q, self.w_k, self.w_v, self.w_out]
        for table in (self.relpos_h, self.relpos_w):
            if table is not None:
                params += table.parameters()
        return params

    def __call__(self, x) -> Tensor:
        return full_attention_2d_relpos(x, self) if self.has_relpos else full_attention_2d(x, self)


# Queries per block when running without a graph; bounds the [heads, Q, HW] buffer.
_QUERY_CHUNK = 512


def full_attention_2d(x, layer: Full2DAttentionLayer) -> Tensor:
    """``y_ij = sum_{h,w} softmax_{hw}(q_ij . k_hw) v_hw`` over all positions; tables ignored."""
    x = T.tensor(x)
    layer._check_input(x)
    _, h, w = x.shape
    q, k, v = layer._qkv(x)
    n, d = q.shape[:2]
    q, k, v = (T.reshape(t, (n, d, h * w)) for t in (q, k, v))

    def block(qb: Tensor) -> Tensor:
        with T.flop_stage("score"):
            attn = T.softmax_lastdim(T.einsum("ndp,ndk->npk", qb, k))
            return T.einsum("npk,ndk->ndp", attn, v)

    if T._current_graph() is None and h * w > _QUERY_CHUNK:
        # inference only: identical arithmetic per query, split to cap memory
        parts = [block(Tensor(q.data[:, :, s : s + _QUERY_CHUNK])).data for s in range(0, h * w, _QUERY_CHUNK)]
        y = Tensor(np.concatenate(parts, axis=2))
    else:
        y = block(q)
    return layer._output(T.reshape(y, (n, d, h, w)))


def full_attention_2d_relpos(x, layer: Full2DAttentionLayer) -> Tensor:
    """2D attention with relative terms from separate height and width tables.

    The positional vector for query ``(i, j)`` and key ``(h, w)`` is
    ``R_h[h - i] + R_w[w - j]`` for each of the query, key and value tables.
    """
    if not layer.has_relpos:
        raise ValueError("full_attention_2d_relpos requires relpos_h and relpos_w tables")
    x = T.tensor(x)
    layer._check_input(x)
    _, h, w = x.shape
    q, k, v = layer._qkv(x)
    n, d = q.shape[:2]
    rq_h, rk_h, rv_h = (_lookup(t, h) for t in layer.relpos_h.parameters())
    rq_w, rk_w, rv_w = (_lookup(t, w) for t in layer.relpos_w.parameters())
    # logits indexed [n, i, j, h, w]
    with T.flop_stage("score"):
        qk = T.reshape(T.einsum("ndp,ndk->npk", T.reshape(q, (n, d, h * w)), T.reshape(k, (n, d, h * w))), (n, h, w, h, w))
    with T.flop_stage("positional"):
        qr = T.add(
            T.reshape(T.einsum("ndij,nihd->nijh", q, rq_h), (n, h, w, h, 1)),
            T.reshape(T.einsum("ndij,njwd->nijw", q, rq_w), (n, h, w, 1, w)),
        )
        kr = T.add(
            T.reshape(T.einsum("ndhw,nihd->nihw", k, rk_h), (n, h, 1, h, w)),
            T.reshape(T.einsum("ndhw,njwd->njhw", k, rk_w), (n, 1, w, h, w)),
        )
    logits = T.add(T.add(qk, qr), kr)
    attn = T.reshape(T.softmax_lastdim(T.reshape(logits, (n, h, w, h * w))), (n, h, w, h, w))
    with T.flop_stage("score"):
        y = T.einsum("nijhw,ndhw->ndij", attn, v)
    with T.flop_stage("positional"):
        y = T.add(y, T.einsum("nijhw,nihd->ndij", attn, rv_h))
        y = T.add(y, T.einsum("nijhw,njwd->ndij", attn, rv_w))
    return layer._output(y)


# ---------------------------------------------------------------------------
# receptive field


def receptive_field_probe(
    blocks: Sequence[Callable[[Tensor], Tensor]],
    x,
    source: tuple[int, int],
    sink: tuple[int, int],
) -> float:
    """Sum over channel pairs of ``|d y[c, sink] / d x[c', source]|`` through ``blocks``."""
    x = T.tensor(x)
    _, h, w = x.shape
    for name, (r, c) in (("source", source), ("sink", sink)):
        if not (0 <= r < h and 0 <= c < w):
            raise IndexError(f"{name} {(r, c)} outside {h}x{w} map")
    total = 0.0
    for ch in range(x.shape[0]):
        with Graph() as g:
            xt = g.leaf(x.data, "input")
            y = xt
            for blk in blocks:
                y = blk(y)
            grads = g.backward(y[ch, sink[0], sink[1]])
        total += float(np.abs(grads[xt][:, source[0], source[1]]).sum())
    return total


def jacobian(blocks: Sequence[Callable[[Tensor], Tensor]], x) -> np.ndarray:
    """Dense Jacobian ``J[c, i, j, c', h, w]`` of the block composition at ``x``."""
    x = T.tensor(x)
    c, h, w = x.shape
    jac = np.zeros((c, h, w, c, h, w))
    for idx in np.ndindex(c, h, w):
        with Graph() as g:
            xt = g.leaf(x.data, "input")
            y = xt
            for blk in blocks:
                y = blk(y)
            jac[idx] = g.backward(y[idx])[xt]
    return jac
