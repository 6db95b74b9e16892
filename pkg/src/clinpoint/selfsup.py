"""Self-supervision on the fine and coarse grids: contrastive alignment of
time-coincident tokens across modalities, reconstruction of coarse-grid
tokens from attention aggregates, and the masked recovery of missing blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, as_tensor, ops
from .pointcloud import PointCloud


@dataclass
class FgaConfig:
    temperature: float = 0.1
    excluded_modalities: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        self.excluded_modalities = tuple(self.excluded_modalities)


def fga_pairs(cloud: PointCloud, cfg: FgaConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Valid token positions and their ``(V, V)`` positive / negative masks.

    A token is valid when its block is observed and its modality takes part in
    alignment. Positives share case and timestamp with a different modality;
    negatives share the timestamp, with a different case and modality.
    """
    valid = cloud.observed & ~np.isin(cloud.modality, cfg.excluded_modalities)
    idx = np.flatnonzero(valid)
    c, m, t = cloud.case[idx], cloud.modality[idx], cloud.times[idx]
    same_t = t[:, None] == t[None, :]
    diff_m = m[:, None] != m[None, :]
    same_c = c[:, None] == c[None, :]
    return idx, same_t & diff_m & same_c, same_t & diff_m & ~same_c


def fga_loss(cloud: PointCloud, cfg: FgaConfig | None = None) -> Tensor:
    """Mean over tokens with at least one positive of
    ``-log(sum_pos e^{s/tau} / (sum_pos e^{s/tau} + sum_neg e^{s/tau}))``
    with cosine similarity ``s``."""
    cfg = cfg or FgaConfig()
    idx, pos, neg = fga_pairs(cloud, cfg)
    rows = np.flatnonzero(pos.any(axis=1))
    if not len(rows):
        return Tensor(np.zeros(()))
    # only tokens that appear in some pair matter
    cols = np.flatnonzero(pos[rows].any(axis=0) | neg[rows].any(axis=0))
    pos, neg = pos[np.ix_(rows, cols)], neg[np.ix_(rows, cols)]
    z = ops.l2_normalize(cloud.tokens)
    zr = ops.take(z, idx[rows])
    zc = ops.take(z, idx[cols])
    s = ops.mul(ops.matmul(zr, ops.transpose(zc)), 1.0 / cfg.temperature)
    both = pos | neg
    shift = np.where(both, s.data, -np.inf).max(axis=1, keepdims=True)
    e = ops.exp(ops.sub(s, shift))
    num = ops.sum(ops.mul(e, pos.astype(np.float64)), axis=1)
    den = ops.sum(ops.mul(e, both.astype(np.float64)), axis=1)
    per_row = ops.sub(ops.log(den), ops.log(num))
    return ops.mean(per_row)


def fgr_reconstruct(rec3: PointCloud, rec4: Tensor, sampler) -> Tensor:
    """Sum of the layer-3 reconstruction, brought to the coarse grid by the
    shared sampling layer (every block sampled), and the layer-4 one."""
    sampled, _ = sampler(rec3, np.ones((rec3.num_cases, rec3.num_modalities), dtype=bool))
    if sampled.tokens.shape != rec4.shape:
        raise ValueError(f"reconstruction shapes differ after sampling: "
                         f"{sampled.tokens.shape} vs {rec4.shape}")
    return ops.add(sampled.tokens, rec4)


def fgr_loss(recon, target, mask: np.ndarray, reduction: str = "mean",
             detach_target: bool = True) -> Tensor:
    """Squared error over tokens of observed blocks.

    ``reduction="sum"`` is the plain sum; ``"mean"`` divides by the number of
    observed scalar entries; ``"relative"`` divides the sum by the target's
    squared norm over the same rows, which makes the loss
    independent of token scale. All reductions give 0 when nothing is observed.
    """
    recon, target = as_tensor(recon), as_tensor(target)
    if recon.shape != target.shape:
        raise ValueError(f"fgr_loss: shapes {recon.shape} and {target.shape} differ")
    if reduction not in ("mean", "sum", "relative"):
        raise ValueError(f"reduction must be 'mean', 'sum' or 'relative', got {reduction!r}")
    mask = np.asarray(mask, dtype=bool)
    if detach_target:
        target = ops.detach(target)
    rows = np.flatnonzero(mask)
    if not len(rows):
        return Tensor(np.zeros(()))
    diff = ops.sub(ops.take(recon, rows), ops.take(target, rows))
    total = ops.sum(ops.square(diff))
    if reduction == "mean":
        total = ops.mul(total, 1.0 / diff.data.size)
    elif reduction == "relative":
        energy = ops.sum(ops.square(ops.take(target, rows)))
        total = ops.div(total, ops.add(energy, 1e-12))
    return total


def recovery_update(h, recon, mask: np.ndarray) -> Tensor:
    """Keep observed rows of ``h``; take ``recon`` rows elsewhere (exact copies)."""
    h, recon = as_tensor(h), as_tensor(recon)
    if h.shape != recon.shape:
        raise ValueError(f"recovery_update: shapes {h.shape} and {recon.shape} differ")
    cond = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (h.ndim - 1))
    return ops.where(cond, h, recon)
