"""Low-rank relational attention.

Attention logits couple per-dimension relation vectors through rank-``R``
products of learned projections plus a per-dimension linear (unary) term:

    e_ij = sum_g prod_{* in D} <Q_*^g, r_*> + sum_{* in D} <w_*, r_*> + b

With ``heads > 1`` each relation vector is split into ``heads`` contiguous
chunks and every head owns its own ``Q``, ``w`` and ``b``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import _kernels
from .nn import MLP, LayerNorm, ParamStore
from .numcore import Parameter, Tensor, ops
from .numcore.tensor import make_result
from .pointcloud import PointCloud
from .relations import RelationFeatures, RelationParams, case_relation_table

DIMENSIONS = ("h", "t", "m", "c")


class LowRankCoupling:
    def __init__(self, store: ParamStore, name: str, dims: Sequence[str], rank: int, d: int,
                 heads: int = 1, coupled: bool = True):
        dims = tuple(dims)
        if not dims or any(k not in DIMENSIONS for k in dims) or len(set(dims)) != len(dims):
            raise ValueError(f"active dims must be a nonempty subset of {DIMENSIONS}, got {dims}")
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        self.dims = tuple(k for k in DIMENSIONS if k in dims)
        self.rank = rank
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.coupled = coupled and rank > 0
        self.Q: dict[str, Parameter] = {}
        self.w: dict[str, Parameter] = {}
        for k in self.dims:
            if rank > 0:
                self.Q[k] = store.normal(f"{name}.Q_{k}", (heads, rank, self.d_head), 1.0 / math.sqrt(d))
            self.w[k] = store.zeros(f"{name}.w_{k}", (heads, self.d_head))
        self.b = store.zeros(f"{name}.b", (heads,))

    @property
    def channels(self) -> int:
        """Rank channels plus the trailing unary channel."""
        return self.rank + 1

    def project(self, dim: str, rel: Tensor) -> Tensor:
        """``(K, d)`` relation vectors -> ``(K, heads, rank + 1)`` inner products
        with every ``Q^g`` (first ``rank`` channels) and ``w`` (last channel)."""
        K, H, C = rel.shape[0], self.heads, self.channels
        w = ops.reshape(self.w[dim], (H, 1, self.d_head))
        stacked = ops.concat([self.Q[dim], w], axis=1) if self.rank > 0 else w
        # block-diagonal (d, H*C) matrix so the per-row work is a single matmul
        blocks = ops.einsum("hre,hg->hegr", stacked, np.eye(H))
        return ops.reshape(ops.matmul(rel, ops.reshape(blocks, (self.d, H * C))), (K, H, C))


# ---------------------------------------------------------------------------
# single-pair reference paths
# ---------------------------------------------------------------------------

def _check_rel(rel: RelationFeatures, coupling: LowRankCoupling) -> None:
    if rel.present != coupling.dims:
        raise ValueError(f"relation features cover {rel.present}, coupling expects {coupling.dims}")


def _value(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def couple(rel: RelationFeatures, coupling: LowRankCoupling) -> np.ndarray:
    """Per-head logits ``(heads,)`` for one pair."""
    _check_rel(rel, coupling)
    H, dh = coupling.heads, coupling.d_head
    out = np.zeros(H)
    for h in range(H):
        seg = slice(h * dh, (h + 1) * dh)
        total = 0.0
        if coupling.coupled:
            for g in range(coupling.rank):
                z = 1.0
                for k in coupling.dims:
                    z *= float(np.dot(_value(coupling.Q[k])[h, g], _value(rel.get(k))[seg]))
                total += z
        for k in coupling.dims:
            total += float(np.dot(_value(coupling.w[k])[h], _value(rel.get(k))[seg]))
        out[h] = total + float(_value(coupling.b)[h])
    return out


ORACLE_MAX_DIMS = 4
ORACLE_MAX_WIDTH = 6


def full_tensor_oracle(rel: RelationFeatures, coupling: LowRankCoupling) -> np.ndarray:
    """Per-head logits from the materialized interaction tensor
    ``W = sum_g outer_k Q_k^g`` contracted with ``outer_k r_k``."""
    _check_rel(rel, coupling)
    nd, dh = len(coupling.dims), coupling.d_head
    if nd > ORACLE_MAX_DIMS or dh > ORACLE_MAX_WIDTH:
        raise ValueError(f"oracle limited to |D|<={ORACLE_MAX_DIMS}, width<={ORACLE_MAX_WIDTH}; "
                         f"got |D|={nd}, width={dh}")
    out = np.zeros(coupling.heads)
    for h in range(coupling.heads):
        seg = slice(h * dh, (h + 1) * dh)
        W = np.zeros((dh,) * nd)
        if coupling.coupled:
            for g in range(coupling.rank):
                t = np.ones(())
                for k in coupling.dims:
                    t = np.multiply.outer(t, _value(coupling.Q[k])[h, g])
                W = W + t
        r = np.ones(())
        for k in coupling.dims:
            r = np.multiply.outer(r, _value(rel.get(k))[seg])
        unary = sum(float(np.dot(_value(coupling.w[k])[h], _value(rel.get(k))[seg])) for k in coupling.dims)
        out[h] = float(np.sum(W * r)) + unary + float(_value(coupling.b)[h])
    return out


# ---------------------------------------------------------------------------
# op-counted variants for the complexity benchmark
# ---------------------------------------------------------------------------

class OpCounter:
    """Counts scalar floating-point operations of the wrapped numpy calls."""

    def __init__(self) -> None:
        self.flops = 0

    def dot(self, a: np.ndarray, b: np.ndarray) -> float:
        self.flops += 2 * a.size - 1
        return float(np.dot(a, b))

    def outer(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.multiply.outer(a, b)
        self.flops += out.size
        return out

    def mul(self, a, b):
        self.flops += max(np.size(a), np.size(b))
        return a * b

    def add(self, a, b):
        self.flops += max(np.size(a), np.size(b))
        return a + b

    def total(self, a: np.ndarray) -> float:
        self.flops += a.size - 1
        return float(np.sum(a))


def couple_counted(Q: np.ndarray, w: np.ndarray, b: float, rel: np.ndarray, ops_: OpCounter,
                   coupled: bool = True) -> float:
    """Coupled + unary logit for one head; ``Q (R, nD, d)``, ``w (nD, d)``, ``rel (nD, d)``."""
    R, nD, _ = Q.shape
    total = 0.0
    first = True
    for g in range(R if coupled else 0):
        z = ops_.dot(Q[g, 0], rel[0])
        for k in range(1, nD):
            z = ops_.mul(z, ops_.dot(Q[g, k], rel[k]))
        total = z if first else ops_.add(total, z)
        first = False
    for k in range(nD):
        u = ops_.dot(w[k], rel[k])
        total = u if first else ops_.add(total, u)
        first = False
    return ops_.add(total, b)


def oracle_counted(Q: np.ndarray, w: np.ndarray, b: float, rel: np.ndarray, ops_: OpCounter) -> float:
    R, nD, _ = Q.shape
    W = None
    for g in range(R):
        t = Q[g, 0]
        for k in range(1, nD):
            t = ops_.outer(t, Q[g, k])
        W = t if W is None else ops_.add(W, t)
    r = rel[0]
    for k in range(1, nD):
        r = ops_.outer(r, rel[k])
    total = ops_.total(ops_.mul(W, r))
    for k in range(nD):
        total = ops_.add(total, ops_.dot(w[k], rel[k]))
    return ops_.add(total, b)


@dataclass
class BenchRow:
    d: int
    rank: int
    num_dims: int
    pairs: int
    coupled_flops: int
    oracle_flops: int
    coupled_seconds: float
    oracle_seconds: float
    max_abs_diff: float


def benchmark_coupling(d: int, rank: int, num_dims: int, pairs: int = 50, seed: int = 0) -> BenchRow:
    """Time and count per-pair ops of the low-rank path versus the full tensor."""
    rng = np.random.default_rng(seed)
    Q = rng.normal(size=(rank, num_dims, d))
    w = rng.normal(size=(num_dims, d))
    b = float(rng.normal())
    rels = rng.normal(size=(pairs, num_dims, d))
    cnt_c, cnt_o = OpCounter(), OpCounter()
    t0 = time.perf_counter()
    lr = [couple_counted(Q, w, b, r, cnt_c) for r in rels]
    t1 = time.perf_counter()
    full = [oracle_counted(Q, w, b, r, cnt_o) for r in rels]
    t2 = time.perf_counter()
    diff = float(np.max(np.abs(np.array(lr) - np.array(full))))
    return BenchRow(d, rank, num_dims, pairs, cnt_c.flops // pairs, cnt_o.flops // pairs,
                    (t1 - t0) / pairs, (t2 - t1) / pairs, diff)


# ---------------------------------------------------------------------------
# neighborhoods as sorted edge lists
# ---------------------------------------------------------------------------

@dataclass
class Edges:
    """Edges ``dst <- src`` sorted by ``dst``; every output row has >= 1 edge."""

    dst: np.ndarray
    src: np.ndarray
    n_dst: int

    def __post_init__(self) -> None:
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.src = np.asarray(self.src, dtype=np.int64)
        if len(self.dst) and np.any(np.diff(self.dst) < 0):
            raise ValueError("edges must be sorted by destination")
        counts = np.bincount(self.dst, minlength=self.n_dst)
        if self.n_dst and counts.min() == 0:
            raise ValueError(f"empty neighborhood for output rows {np.flatnonzero(counts == 0)[:5].tolist()}")

    def __len__(self) -> int:
        return len(self.dst)

    @cached_property
    def starts(self) -> np.ndarray:
        return np.searchsorted(self.dst, np.arange(self.n_dst))

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]]) -> "Edges":
        dst = np.repeat(np.arange(len(lists)), [len(x) for x in lists])
        src = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if lists else np.zeros(0)
        return cls(dst, src, len(lists))

    def to_lists(self) -> list[np.ndarray]:
        return np.split(self.src, self.starts[1:])


# ---------------------------------------------------------------------------
# fused edge-logit primitive
# ---------------------------------------------------------------------------

@dataclass
class Factor:
    """Per-edge relation projections: ``plus[plus_idx] - minus[minus_idx]``."""

    plus: Tensor
    plus_idx: np.ndarray
    minus: Tensor | None = None
    minus_idx: np.ndarray | None = None


def edge_logits(factors: Sequence[Factor], bias: Tensor | None, rank: int, coupled: bool = True) -> Tensor:
    """Low-rank logits ``(E, heads)`` from per-dimension factor tables of shape
    ``(K, heads, rank + 1)``. ``bias=None`` leaves the per-head bias out."""
    tables = [f.plus.data for f in factors]
    minus = [None if f.minus is None else f.minus.data for f in factors]
    pidx = [np.ascontiguousarray(f.plus_idx, dtype=np.int64) for f in factors]
    midx = [None if f.minus_idx is None else np.ascontiguousarray(f.minus_idx, dtype=np.int64)
            for f in factors]
    use_rank = rank if coupled else 0
    bias_data = np.zeros(tables[0].shape[1]) if bias is None else bias.data
    out = _kernels.lowrank_forward(tables, pidx, minus, midx, use_rank, bias_data)

    parents = [] if bias is None else [bias]
    for f in factors:
        parents.append(f.plus)
        if f.minus is not None:
            parents.append(f.minus)

    def backward(g):
        grads_plus, grads_minus = _kernels.lowrank_backward(g, tables, pidx, minus, midx, use_rank)
        res = [] if bias is None else [g.sum(axis=0)]
        for f, gp, gm in zip(factors, grads_plus, grads_minus):
            res.append(gp)
            if f.minus is not None:
                res.append(gm)
        return tuple(res)

    return make_result(out, parents, backward, "edge_logits")


def attend(alpha: Tensor, values: Tensor, edges: Edges) -> Tensor:
    """``out[i] = sum_{j in N(i)} alpha_ij * values[j]`` per head.

    ``alpha`` is ``(E, heads)``, ``values`` ``(N, heads, d_head)``; returns
    ``(n_dst, heads, d_head)``."""
    src, dst, starts = edges.src, edges.dst, edges.starts
    a, v = alpha.data, values.data
    out = _kernels.attend_forward(a, v, src, starts, edges.n_dst)

    def backward(g):
        return _kernels.attend_backward(g, a, v, src, dst, alpha.requires_grad, values.requires_grad)

    return make_result(out, (alpha, values), backward, "attend")


# ---------------------------------------------------------------------------
# LRRL
# ---------------------------------------------------------------------------

@dataclass
class LayerResult:
    out: Tensor                     # updated tokens
    agg: Tensor                     # attention aggregate sum_j alpha_ij W_V h_j, (N, d)
    rec: Tensor | None = None       # REC(agg) when the layer carries a reconstruction head
    alpha: Tensor | None = None
    logits: Tensor | None = None
    extras: dict = field(default_factory=dict)


class LrrlLayer:
    """Attention over explicit neighborhoods followed by a residual FFN block.

    ``x = h + attend(...)`` then ``out = x + FFN(LN(x))``. With ``prenorm``
    the relation features and values are computed from ``LN(h)``.
    """

    def __init__(self, store: ParamStore, name: str, d: int, dims: Sequence[str], rank: int,
                 heads: int, num_modalities: int, d_ff: int | None = None, prenorm: bool = True,
                 rec: bool = False, coupled: bool = True, gru_hidden: int | None = None):
        self.name = name
        self.d = d
        self.heads = heads
        self.prenorm = prenorm
        self.relations = RelationParams(store, f"{name}.rel", d, num_modalities, dims, gru_hidden)
        self.coupling = LowRankCoupling(store, f"{name}.coupling", dims, rank, d, heads, coupled)
        self.W_V = store.normal(f"{name}.W_V", (d, d), 1.0 / math.sqrt(d))
        self.ln_attn = LayerNorm(store, f"{name}.ln_attn", d) if prenorm else None
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", d) if prenorm else None
        self.ffn = MLP(store, f"{name}.ffn", d, d_ff or 4 * d, d)
        self.rec = MLP(store, f"{name}.rec", d, d_ff or 4 * d, d) if rec else None

    @property
    def dims(self) -> tuple[str, ...]:
        return self.coupling.dims

    def logits(self, hn: Tensor, cloud: PointCloud, edges: Edges,
               case_table: Tensor | None = None, with_bias: bool = True) -> Tensor:
        cp, rp = self.coupling, self.relations
        factors = []
        for k in cp.dims:
            if k == "h":
                qa = cp.project("h", ops.matmul(hn, rp.W_Q))
                kb = cp.project("h", ops.matmul(hn, rp.W_K))
                factors.append(Factor(qa, edges.dst, kb, edges.src))
            elif k == "t":
                dt = cloud.times[edges.dst] - cloud.times[edges.src]
                uniq, inv = np.unique(dt, return_inverse=True)
                factors.append(Factor(cp.project("t", rp.phi_t(uniq)), inv.reshape(-1)))
            elif k == "m":
                M = rp.num_modalities
                table = cp.project("m", ops.reshape(rp.E_m, (M * M, self.d)))
                factors.append(Factor(table, cloud.modality[edges.dst] * M + cloud.modality[edges.src]))
            elif k == "c":
                if case_table is None:
                    raise ValueError(f"{self.name}: case dimension active but no case relations given")
                B = cloud.num_cases
                factors.append(Factor(cp.project("c", case_table),
                                      cloud.case[edges.dst] * B + cloud.case[edges.src]))
        return edge_logits(factors, cp.b if with_bias else None, cp.rank, cp.coupled)

    def __call__(self, cloud: PointCloud, edges: Edges, case_blocks=None,
                 availability: np.ndarray | None = None, keep_attention: bool = False) -> LayerResult:
        """``case_blocks(hn)`` must return the per-modality ``(B, T_m, d)`` grid
        blocks of the normalized tokens when the case dimension is active."""
        h = cloud.tokens
        if edges.n_dst != len(cloud):
            raise ValueError(f"{self.name}: {edges.n_dst} neighborhoods for {len(cloud)} tokens")
        hn = self.ln_attn(h) if self.prenorm else h
        case_table = None
        if "c" in self.dims:
            case_table = case_relation_table(case_blocks(hn), availability, self.relations)
        # a per-head constant cannot change a softmax row, so the bias is left
        # out of the normalization; this keeps the weights bitwise independent of it
        e = self.logits(hn, cloud, edges, case_table, with_bias=False)
        alpha = ops.segment_softmax(e, edges.starts, edges.dst)
        v = ops.reshape(ops.matmul(hn, self.W_V), (len(cloud), self.heads, self.d // self.heads))
        agg = ops.reshape(attend(alpha, v, edges), (len(cloud), self.d))
        x = ops.add(h, agg)
        out = ops.add(x, self.ffn(self.ln_ffn(x) if self.prenorm else x))
        rec = self.rec(agg) if self.rec is not None else None
        return LayerResult(out, agg, rec, alpha if keep_attention else None,
                           ops.add(e, self.coupling.b) if keep_attention else None)


def dense_reference(layer: LrrlLayer, cloud: PointCloud, neighborhoods: Sequence[Sequence[int]],
                    case_relations: dict | None = None) -> np.ndarray:
    """O(N^2) per-pair evaluation of an LRRL layer (no tape), for testing.

    Builds every relation vector explicitly, scores it with :func:`couple`
    and normalizes with a dense masked softmax."""
    from .relations import content_relation, modality_relation, time_relation

    def np_ln(x, ln):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * ln.gain.data + ln.bias.data

    def np_mlp(x, mlp):
        hdn = x @ mlp.fc1.W.data + mlp.fc1.b.data
        hdn = ops.gelu(hdn).data
        return hdn @ mlp.fc2.W.data + mlp.fc2.b.data

    h = cloud.tokens.data
    N = len(h)
    hn = np_ln(h, layer.ln_attn) if layer.prenorm else h
    H = layer.heads
    logits = np.zeros((N, N, H))
    mask = np.zeros((N, N), dtype=bool)
    rp = layer.relations
    for i in range(N):
        for j in neighborhoods[i]:
            rel = RelationFeatures()
            if "h" in layer.dims:
                rel.r_h = content_relation(hn[i], hn[j], rp).data
            if "t" in layer.dims:
                rel.r_t = time_relation(float(cloud.times[i]), float(cloud.times[j]), rp).data
            if "m" in layer.dims:
                rel.r_m = modality_relation(int(cloud.modality[i]), int(cloud.modality[j]), rp).data
            if "c" in layer.dims:
                rel.r_c = case_relations[(int(cloud.case[i]), int(cloud.case[j]))]
            logits[i, j] = couple(rel, layer.coupling)
            mask[i, j] = True
    dh = layer.d // H
    v = (hn @ layer.W_V.data).reshape(N, H, dh)
    agg = np.zeros((N, H, dh))
    for hd in range(H):
        alpha = ops.softmax(logits[:, :, hd], mask).data
        agg[:, hd, :] = alpha @ v[:, hd, :]
    agg = agg.reshape(N, layer.d)
    x = h + agg
    return x + np_mlp(np_ln(x, layer.ln_ffn) if layer.prenorm else x, layer.ffn)
