"""Pairwise relation features over content, time, modality and case.

Weights use the row-vector convention: ``W_Q h`` in the math is ``h @ W_Q``
here, with ``W_Q`` stored as ``(d_in, d_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import MLP, Linear, ParamStore
from .numcore import Tensor, as_tensor, ops


class TimeEncoder:
    """Two-layer perceptron over the signed interval in hours."""

    def __init__(self, store: ParamStore, name: str, d: int, hidden: int | None = None,
                 input_scale: float = 1.0 / 12.0):
        hidden = hidden or d
        self.mlp = MLP(store, name, 1, hidden, d)
        # raw hours reach +-48; keep the first layer out of saturation at init
        self.mlp.fc1.W.data *= input_scale

    def __call__(self, dt: np.ndarray | Tensor) -> Tensor:
        dt = as_tensor(dt)
        return self.mlp(ops.reshape(dt, (dt.shape[0], 1)))


class BiGRU:
    """Bidirectional GRU read out as ``Linear([h_fwd_last, h_bwd_last])``."""

    def __init__(self, store: ParamStore, name: str, d_in: int, hidden: int, d_out: int):
        self.hidden = hidden
        s = 1.0 / math.sqrt(hidden)
        self.cells = []
        for direction in ("fwd", "bwd"):
            self.cells.append(dict(
                Wx=store.normal(f"{name}.{direction}.Wx", (d_in, 3 * hidden), s),
                Wh=store.normal(f"{name}.{direction}.Wh", (hidden, 3 * hidden), s),
                bx=store.zeros(f"{name}.{direction}.bx", (3 * hidden,)),
                bh=store.zeros(f"{name}.{direction}.bh", (3 * hidden,)),
            ))
        self.out = Linear(store, f"{name}.out", 2 * hidden, d_out)

    def _run(self, cell: dict, seq: Tensor, reverse: bool) -> Tensor:
        P, T, _ = seq.shape
        H = self.hidden
        gx = ops.add(ops.matmul(seq, cell["Wx"]), cell["bx"])  # (P, T, 3H)
        h = Tensor(np.zeros((P, H)))
        steps = range(T - 1, -1, -1) if reverse else range(T)
        for t in steps:
            x_t = gx[:, t, :]
            gh = ops.add(ops.matmul(h, cell["Wh"]), cell["bh"])
            z = ops.sigmoid(ops.add(x_t[:, :H], gh[:, :H]))
            r = ops.sigmoid(ops.add(x_t[:, H:2 * H], gh[:, H:2 * H]))
            n = ops.tanh(ops.add(x_t[:, 2 * H:], ops.mul(r, gh[:, 2 * H:])))
            h = ops.add(n, ops.mul(z, ops.sub(h, n)))
        return h

    def __call__(self, seq: Tensor) -> Tensor:
        """``seq`` is ``(P, T, d_in)``; returns ``(P, d_out)``."""
        hf = self._run(self.cells[0], seq, reverse=False)
        hb = self._run(self.cells[1], seq, reverse=True)
        return self.out(ops.concat([hf, hb], axis=1))


class RelationParams:
    """Parameters of the relation extractors for one layer's active dimensions."""

    def __init__(self, store: ParamStore, name: str, d: int, num_modalities: int,
                 dims: Sequence[str], gru_hidden: int | None = None, time_hidden: int | None = None):
        self.d = d
        self.dims = tuple(dims)
        self.num_modalities = num_modalities
        s = 1.0 / math.sqrt(d)
        self.W_Q = store.normal(f"{name}.W_Q", (d, d), s) if "h" in dims else None
        self.W_K = store.normal(f"{name}.W_K", (d, d), s) if "h" in dims else None
        self.phi_t = TimeEncoder(store, f"{name}.phi_t", d, time_hidden) if "t" in dims else None
        self.E_m = store.normal(f"{name}.E_m", (num_modalities, num_modalities, d), s) \
            if "m" in dims else None
        self.case_gru = BiGRU(store, f"{name}.case_gru", d, gru_hidden or max(1, d // 2), d) \
            if "c" in dims else None


@dataclass
class RelationFeatures:
    """Per-pair relation vectors; only the owning layer's active dims are set."""

    r_h: np.ndarray | None = None
    r_t: np.ndarray | None = None
    r_m: np.ndarray | None = None
    r_c: np.ndarray | None = None

    def get(self, dim: str) -> np.ndarray | None:
        return getattr(self, f"r_{dim}")

    @property
    def present(self) -> tuple[str, ...]:
        return tuple(k for k in "htmc" if getattr(self, f"r_{k}") is not None)


# ---------------------------------------------------------------------------
# single-pair extractors
# ---------------------------------------------------------------------------

def content_relation(h_i, h_j, params: RelationParams) -> Tensor:
    h_i, h_j = as_tensor(h_i), as_tensor(h_j)
    if h_i.shape != h_j.shape:
        raise ValueError(f"content_relation: shapes {h_i.shape} and {h_j.shape} differ")
    return ops.sub(ops.matmul(h_i, params.W_Q), ops.matmul(h_j, params.W_K))


def time_relation(t_i: float, t_j: float, params: RelationParams) -> Tensor:
    return ops.reshape(params.phi_t(np.array([t_i - t_j])), (params.d,))


def modality_relation(m_i: int, m_j: int, params: RelationParams) -> Tensor:
    M = params.num_modalities
    if not (0 <= m_i < M and 0 <= m_j < M):
        raise IndexError(f"modality ids ({m_i}, {m_j}) outside [0, {M})")
    flat = ops.reshape(params.E_m, (M * M, params.d))
    return ops.reshape(ops.take(flat, np.array([m_i * M + m_j])), (params.d,))


def case_relation(seqs_i: Sequence[Tensor | None], seqs_j: Sequence[Tensor | None],
                  mu_i: Sequence[bool], mu_j: Sequence[bool], params: RelationParams) -> Tensor:
    """Mean over co-observed modalities of ``BiGRU(H_m^{c_i} - H_m^{c_j})``.

    Sequences must be grid-aligned (equal length per modality). Returns the
    zero vector when no modality is co-observed.
    """
    shared = [m for m in range(len(mu_i)) if mu_i[m] and mu_j[m]]
    if not shared:
        return Tensor(np.zeros(params.d))
    outs = []
    for m in shared:
        a, b = as_tensor(seqs_i[m]), as_tensor(seqs_j[m])
        if a.shape != b.shape:
            raise ValueError(f"case_relation: modality {m} sequences {a.shape} and {b.shape} "
                             "are not grid-aligned")
        diff = ops.sub(a, b)
        outs.append(params.case_gru(ops.reshape(diff, (1,) + diff.shape)))
    total = outs[0]
    for o in outs[1:]:
        total = ops.add(total, o)
    return ops.reshape(ops.mul(total, 1.0 / len(shared)), (params.d,))


def case_relation_table(blocks: Sequence[Tensor], availability: np.ndarray,
                        params: RelationParams) -> Tensor:
    """Relation vectors for every ordered case pair, computed once per pass.

    ``blocks[m]`` holds modality ``m`` tokens as ``(B, T_m, d)``. Row
    ``ci * B + cj`` of the result is the relation of case ``ci`` to ``cj``.
    """
    B, M = availability.shape
    ci = np.repeat(np.arange(B), B)
    cj = np.tile(np.arange(B), B)
    mu = availability.astype(np.float64)
    co = mu[ci] * mu[cj]                               # (B*B, M)
    count = co.sum(axis=1, keepdims=True)
    weights = np.divide(co, count, out=np.zeros_like(co), where=count > 0)
    total = None
    for m in range(M):
        w = weights[:, m:m + 1]
        if not w.any():
            continue
        diff = ops.sub(ops.take(blocks[m], ci), ops.take(blocks[m], cj))
        term = ops.mul(params.case_gru(diff), w)
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(np.zeros((B * B, params.d)))
    return total
