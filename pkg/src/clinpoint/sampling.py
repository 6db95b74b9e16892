"""Anchor-grid sampling: compress each (case, modality) token sequence onto a
fixed temporal grid with content+time low-rank attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .lrra import Edges, Factor, LowRankCoupling, attend, edge_logits
from .nn import ParamStore
from .numcore import Tensor, ops
from .pointcloud import PointCloud
from .relations import RelationParams


def anchor_times(interval: float, horizon: float) -> np.ndarray:
    """``{0, dt, 2dt, ...}`` up to and including ``horizon``."""
    if interval <= 0:
        raise ValueError(f"grid interval must be positive, got {interval}")
    n = int(math.floor(horizon / interval + 1e-9)) + 1
    return np.arange(n, dtype=np.float64) * interval


@dataclass(frozen=True)
class GridLayout:
    """Token layout of a sampled cloud: case-major, then modality, then anchor.

    ``modalities`` lists the modality ids present (in order) and ``grids`` the
    anchor times of each; every case owns one contiguous block of
    ``block_size`` tokens.
    """

    modalities: tuple[int, ...]
    grids: tuple[np.ndarray, ...]
    num_cases: int

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.cumsum([0] + [len(g) for g in self.grids])

    @property
    def block_size(self) -> int:
        return int(self.offsets[-1])

    def __len__(self) -> int:
        return self.num_cases * self.block_size

    def local(self, modality: int) -> int:
        return self.modalities.index(modality)

    def position(self, case: int, modality: int, anchor: int) -> int:
        return case * self.block_size + int(self.offsets[self.local(modality)]) + anchor

    def block(self, case: int, modality: int) -> np.ndarray:
        start = self.position(case, modality, 0)
        return np.arange(start, start + len(self.grids[self.local(modality)]))

    def last(self, modality: int) -> np.ndarray:
        """Position of the final anchor of ``modality`` for every case."""
        k = self.local(modality)
        return np.arange(self.num_cases) * self.block_size + int(self.offsets[k + 1]) - 1

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        per_case_t = np.concatenate(self.grids)
        per_case_m = np.concatenate([np.full(len(g), m) for m, g in zip(self.modalities, self.grids)])
        times = np.tile(per_case_t, self.num_cases)
        mods = np.tile(per_case_m, self.num_cases).astype(np.int64)
        cases = np.repeat(np.arange(self.num_cases), self.block_size)
        return times, mods, cases

    def blocks(self, tokens: Tensor) -> list[Tensor]:
        """Split ``(N, d)`` tokens into per-modality ``(B, T_m, d)`` tensors."""
        d = tokens.shape[1]
        cube = ops.reshape(tokens, (self.num_cases, self.block_size, d))
        return [cube[:, int(self.offsets[k]):int(self.offsets[k + 1]), :] for k in range(len(self.grids))]


@dataclass
class AnchorGrid:
    intervals: dict[int, float]
    horizon: float = 48.0

    def times(self, modality: int) -> np.ndarray:
        return anchor_times(self.intervals[modality], self.horizon)

    def layout(self, num_cases: int, modalities: Sequence[int] | None = None) -> GridLayout:
        mods = tuple(sorted(self.intervals)) if modalities is None else tuple(modalities)
        return GridLayout(mods, tuple(self.times(m) for m in mods), num_cases)


class LrrslLayer:
    """Learnable anchors (one query per modality) attending over the whole
    (case, modality) sequence with content and time relations only."""

    def __init__(self, store: ParamStore, name: str, d: int, rank: int, heads: int,
                 grid: AnchorGrid, num_modalities: int, coupled: bool = True):
        self.name = name
        self.d = d
        self.heads = heads
        self.grid = grid
        self.modalities = tuple(sorted(grid.intervals))
        self.relations = RelationParams(store, f"{name}.rel", d, num_modalities, ("h", "t"))
        self.coupling = LowRankCoupling(store, f"{name}.coupling", ("h", "t"), rank, d, heads, coupled)
        self.W_V = store.normal(f"{name}.W_V", (d, d), 1.0 / math.sqrt(d))
        # one learnable query per modality; doubles as the missing-modality placeholder
        self.anchor = store.normal(f"{name}.anchor", (len(self.modalities), d), 1.0)

    def __call__(self, cloud: PointCloud, availability: np.ndarray | None = None) -> tuple[PointCloud, GridLayout]:
        """Sample ``cloud`` onto the grid.

        With ``availability`` given, blocks whose modality is missing for the
        case (``availability[c, m] == 0``) emit the modality's anchor vector at
        every grid point. Without it, every block that has tokens is sampled
        and only blocks without any token fall back to the anchor vector.
        """
        B = cloud.num_cases
        layout = self.grid.layout(B, self.modalities)
        times, mods, cases = layout.coords
        n_out = len(layout)
        dst_l, src_l, slots_att, slots_ph = [], [], [], []
        sampled = np.zeros((B, cloud.num_modalities), dtype=bool)
        for c in range(B):
            for m in self.modalities:
                pos = cloud.positions(c, m)
                slot = layout.block(c, m)
                use = len(pos) > 0 if availability is None else bool(availability[c, m])
                if use and not len(pos):
                    raise ValueError(f"{self.name}: case {c} modality {m} is marked observed but has no tokens")
                if use:
                    sampled[c, m] = True
                    base = sum(len(s) for s in slots_att)
                    local = np.arange(len(slot)) + base
                    dst_l.append(np.repeat(local, len(pos)))
                    src_l.append(np.tile(pos, len(slot)))
                    slots_att.append(slot)
                else:
                    slots_ph.append(slot)
        parts, order = [], []
        if slots_att:
            att_slots = np.concatenate(slots_att)
            edges = Edges(np.concatenate(dst_l), np.concatenate(src_l), len(att_slots))
            out = self._attend(cloud, edges, times[att_slots], mods[att_slots])
            parts.append(out)
            order.append(att_slots)
        if slots_ph:
            ph_slots = np.concatenate(slots_ph)
            loc = np.array([self.modalities.index(m) for m in mods[ph_slots]], dtype=np.int64)
            parts.append(ops.take(self.anchor, loc))
            order.append(ph_slots)
        stacked = ops.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        inverse = np.empty(n_out, dtype=np.int64)
        inverse[np.concatenate(order)] = np.arange(n_out)
        tokens = ops.take(stacked, inverse)
        observed = availability[cases, mods] if availability is not None else sampled[cases, mods]
        return PointCloud(tokens, times, mods, cases, observed.astype(bool), B, cloud.num_modalities), layout

    def _attend(self, cloud: PointCloud, edges: Edges, q_times: np.ndarray, q_mods: np.ndarray) -> Tensor:
        cp, rp = self.coupling, self.relations
        h = cloud.tokens
        q_local = np.array([self.modalities.index(m) for m in q_mods], dtype=np.int64)
        factors = []
        qa = cp.project("h", ops.matmul(self.anchor, rp.W_Q))
        kb = cp.project("h", ops.matmul(h, rp.W_K))
        factors.append(Factor(qa, q_local[edges.dst], kb, edges.src))
        dt = q_times[edges.dst] - cloud.times[edges.src]
        uniq, inv = np.unique(dt, return_inverse=True)
        factors.append(Factor(cp.project("t", rp.phi_t(uniq)), inv.reshape(-1)))
        # the bias is shift-only within each softmax row (see LrrlLayer)
        e = edge_logits(factors, None, cp.rank, cp.coupled)
        alpha = ops.segment_softmax(e, edges.starts, edges.dst)
        v = ops.reshape(ops.matmul(h, self.W_V), (len(cloud), self.heads, self.d // self.heads))
        return ops.reshape(attend(alpha, v, edges), (edges.n_dst, self.d))


def grid_align_check(a: PointCloud, b: PointCloud, modality: int) -> bool:
    """True iff every case of both clouds carries the same timestamp sequence
    for ``modality``."""
    ref = None
    for cloud in (a, b):
        for c in range(cloud.num_cases):
            t = cloud.times[cloud.positions(c, modality)]
            if ref is None:
                ref = t
            elif len(t) != len(ref) or not np.array_equal(t, ref):
                return False
    return ref is not None
