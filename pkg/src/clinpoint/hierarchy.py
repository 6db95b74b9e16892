"""Five-level interaction pipeline over clinical point clouds.

Stages, in order: local (same case and modality, within a time window),
sampling onto a fine grid, intra-modality, projection to the shared width,
inter-modality, sampling onto a coarse grid, cross-sample, recovery of
missing blocks, and global (whole case) interaction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lrra import Edges, LrrlLayer
from .nn import Linear, ParamStore
from .numcore import Tensor, no_grad, ops
from .pointcloud import EventBatch, ModalityEncoder, PointCloud, encode
from .sampling import AnchorGrid, GridLayout, LrrslLayer
from .selfsup import fgr_reconstruct, recovery_update


@dataclass(frozen=True)
class LevelSpec:
    level: int
    dims: tuple[str, ...]
    scope: str  # "modality" or "shared"


LEVELS = {
    1: LevelSpec(1, ("h", "t"), "modality"),
    2: LevelSpec(2, ("h", "t"), "modality"),
    3: LevelSpec(3, ("h", "t", "m"), "shared"),
    4: LevelSpec(4, ("h", "t", "m", "c"), "shared"),
    5: LevelSpec(5, ("h", "t", "m"), "shared"),
}


# ---------------------------------------------------------------------------
# neighborhoods
# ---------------------------------------------------------------------------

def neighborhood_mask(cloud: PointCloud, level: int, delta: float = 2.0) -> np.ndarray:
    """Dense ``(N, N)`` predicate ``j in N(i)`` before level-1 truncation.

    Levels 1-4 only admit observed keys (placeholder tokens of missing blocks
    never serve as context); level 5 runs after recovery and admits every
    token of the case. Self is always included.
    """
    c, m, t = cloud.case, cloud.modality, cloud.times
    same_c = c[:, None] == c[None, :]
    same_m = m[:, None] == m[None, :]
    if level == 1:
        mask = same_c & same_m & (np.abs(t[:, None] - t[None, :]) <= delta)
    elif level == 2:
        mask = same_c & same_m
    elif level == 3:
        mask = same_c & ~same_m
    elif level == 4:
        mask = ~same_c
    elif level == 5:
        mask = same_c.copy()
    else:
        raise ValueError(f"level must be 1..5, got {level}")
    if level <= 4:
        mask &= cloud.observed[None, :]
    np.fill_diagonal(mask, True)
    return mask


def level_edges(cloud: PointCloud, level: int, delta: float = 2.0, k_max: int | None = 6) -> Edges:
    """Neighborhoods as edges sorted by (destination, source).

    At level 1 each neighborhood keeps at most ``k_max`` members: self first,
    then the others by increasing ``|t_i - t_j|`` with ties to the lower index.
    """
    mask = neighborhood_mask(cloud, level, delta)
    if level == 1 and k_max is not None:
        if k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {k_max}")
        gap = np.abs(cloud.times[:, None] - cloud.times[None, :])
        np.fill_diagonal(gap, -1.0)
        gap[~mask] = np.inf
        order = np.argsort(gap, axis=1, kind="stable")[:, :k_max]
        keep = np.zeros_like(mask)
        rows = np.repeat(np.arange(len(mask)), order.shape[1])
        keep[rows, order.reshape(-1)] = True
        mask &= keep
    dst, src = np.nonzero(mask)
    return Edges(dst, src, len(cloud))


def build_neighborhoods(cloud: PointCloud, spec: LevelSpec | int, delta: float = 2.0,
                        k_max: int | None = 6) -> list[np.ndarray]:
    level = spec.level if isinstance(spec, LevelSpec) else spec
    return level_edges(cloud, level, delta, k_max).to_lists()


def cross_sample_neighborhood(cloud: PointCloud) -> list[np.ndarray]:
    return build_neighborhoods(cloud, 4)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

DEFAULT_FINE = (1.0, 4.0)
DEFAULT_COARSE = (4.0, 12.0)


def _intervals(given: Sequence[float] | None, default: Sequence[float], M: int) -> dict[int, float]:
    vals = list(given) if given is not None else [default[min(m, len(default) - 1)] for m in range(M)]
    if len(vals) != M:
        raise ValueError(f"expected {M} grid intervals, got {len(vals)}")
    return {m: float(v) for m, v in enumerate(vals)}


@dataclass
class ModelConfig:
    feature_dims: tuple[int, ...]
    d: int = 32
    rank: int = 8
    heads: int = 8
    delta: float = 2.0
    k_max: int = 6
    fine_intervals: tuple[float, ...] | None = None
    coarse_intervals: tuple[float, ...] | None = None
    horizon: float = 48.0
    d_ff: int | None = None
    coupled: bool = True
    prenorm: bool = True
    gru_hidden: int | None = None
    init_seed: int = 0

    @property
    def num_modalities(self) -> int:
        return len(self.feature_dims)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["feature_dims"] = list(self.feature_dims)
        for k in ("fine_intervals", "coarse_intervals"):
            if out[k] is not None:
                out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["feature_dims"] = tuple(raw["feature_dims"])
        for k in ("fine_intervals", "coarse_intervals"):
            if raw.get(k) is not None:
                raw[k] = tuple(raw[k])
        return cls(**raw)


@dataclass
class LayerOutputs:
    """Everything the losses and inference need from one forward pass."""

    availability: np.ndarray
    fine: GridLayout
    coarse: GridLayout
    h2: PointCloud              # layer-2 output, projected to the shared width
    h3: PointCloud              # layer-3 output
    h3_rec: Tensor              # layer-3 reconstruction aggregate
    h4_in: PointCloud           # coarse-grid sample of h3
    h4: PointCloud              # layer-4 output before recovery
    h4_rec: Tensor
    recon: Tensor               # reconstruction estimate for the coarse grid
    h4_recovered: PointCloud
    h5: PointCloud
    extras: dict = field(default_factory=dict)

    @property
    def token_mask(self) -> np.ndarray:
        """Per-token observation flag of the coarse-grid clouds."""
        return self.h4.observed


class HierarchyModel:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None):
        from .objectives import Heads

        self.cfg = cfg
        self.store = store or ParamStore(np.random.default_rng(cfg.init_seed))
        M, d = cfg.num_modalities, cfg.d
        common = dict(rank=cfg.rank, heads=cfg.heads, num_modalities=M)
        self.fine = AnchorGrid(_intervals(cfg.fine_intervals, DEFAULT_FINE, M), cfg.horizon)
        self.coarse = AnchorGrid(_intervals(cfg.coarse_intervals, DEFAULT_COARSE, M), cfg.horizon)
        self.encoder = ModalityEncoder(self.store, cfg.feature_dims, d)
        lrrl = dict(d_ff=cfg.d_ff, prenorm=cfg.prenorm, coupled=cfg.coupled, **common)
        self.local = [LrrlLayer(self.store, f"l1.m{m}", d, LEVELS[1].dims, **lrrl) for m in range(M)]
        self.sample1 = [LrrslLayer(self.store, f"s1.m{m}", d, cfg.rank, cfg.heads,
                                   AnchorGrid({m: self.fine.intervals[m]}, cfg.horizon), M, cfg.coupled)
                        for m in range(M)]
        self.intra = [LrrlLayer(self.store, f"l2.m{m}", d, LEVELS[2].dims, **lrrl) for m in range(M)]
        self.project = [Linear(self.store, f"proj.m{m}", d, d) for m in range(M)]
        self.inter = LrrlLayer(self.store, "l3", d, LEVELS[3].dims, rec=True, **lrrl)
        self.sample3 = LrrslLayer(self.store, "s3", d, cfg.rank, cfg.heads, self.coarse, M, cfg.coupled)
        self.cross = LrrlLayer(self.store, "l4", d, LEVELS[4].dims, rec=True, gru_hidden=cfg.gru_hidden, **lrrl)
        self.glob = LrrlLayer(self.store, "l5", d, LEVELS[5].dims, **lrrl)
        self.heads = Heads(self.store, d, M)

    @property
    def params(self):
        return list(self.store)

    def __call__(self, batch: EventBatch, mode: str = "train") -> LayerOutputs:
        return self.forward(batch, mode)

    def forward(self, batch: EventBatch, mode: str = "train") -> LayerOutputs:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval":
            with no_grad():
                return self._forward(batch)
        return self._forward(batch)

    def _forward(self, batch: EventBatch) -> LayerOutputs:
        cfg = self.cfg
        M, B = cfg.num_modalities, batch.num_cases
        avail = batch.availability.astype(bool)
        events = encode(batch, self.encoder)

        # levels 1-2 run per modality with private parameters
        fine = self.fine.layout(B)
        parts, order = [], []
        for m in range(M):
            sel = np.flatnonzero(events.modality == m)
            sub = events.subcloud(sel)
            if len(sel):
                sub = sub.with_tokens(self.local[m](sub, level_edges(sub, 1, cfg.delta, cfg.k_max)).out)
            sampled, _ = self.sample1[m](sub, avail)
            res = self.intra[m](sampled, level_edges(sampled, 2))
            parts.append(self.project[m](res.out))
            order.append(np.concatenate([fine.block(c, m) for c in range(B)]) if B else np.zeros(0, int))
        inverse = np.empty(len(fine), dtype=np.int64)
        inverse[np.concatenate(order)] = np.arange(len(fine))
        t1, m1, c1 = fine.coords
        h2 = PointCloud(ops.take(ops.concat(parts, axis=0), inverse), t1, m1, c1,
                        avail[c1, m1], B, M)

        r3 = self.inter(h2, level_edges(h2, 3))
        h3 = h2.with_tokens(r3.out)
        h4_in, coarse = self.sample3(h3, avail)
        r4 = self.cross(h4_in, level_edges(h4_in, 4), case_blocks=coarse.blocks, availability=avail)
        h4 = h4_in.with_tokens(r4.out)
        recon = fgr_reconstruct(h3.with_tokens(r3.rec), r4.rec, self.sample3)
        recovered = h4.with_tokens(recovery_update(h4.tokens, recon, h4.observed))

        r5 = self.glob(recovered, level_edges(recovered, 5))
        h5 = recovered.with_tokens(r5.out)
        return LayerOutputs(avail, fine, coarse, h2, h3, r3.rec, h4_in, h4, r4.rec, recon, recovered, h5)
