"""Edge-level kernels for the attention layers.

Two interchangeable implementations: sequential loops compiled with numba
(default) and vectorized numpy (reference, also the fallback when numba is
unavailable). Both accumulate in a fixed order, so each is deterministic on
its own; they agree to rounding, not bitwise.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_BACKEND = "numba" if numba is not None and os.environ.get("CLINPOINT_KERNELS", "numba") == "numba" \
    else "numpy"


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


# ---------------------------------------------------------------------------
# table packing: every factor is plus[pidx] - minus[midx]; tables are stacked
# so the compiled kernels see a fixed signature
# ---------------------------------------------------------------------------

def _pack(tables, pidx, minus, midx):
    nf = len(tables)
    H, C = tables[0].shape[1], tables[0].shape[2]
    offs = np.cumsum([0] + [t.shape[0] for t in tables])
    T = np.concatenate(tables, axis=0)
    P = np.stack([p + o for p, o in zip(pidx, offs[:-1])])
    mtabs = [m for m in minus if m is not None]
    if mtabs:
        moffs, cur = [], 0
        for m in minus:
            moffs.append(cur)
            cur += 0 if m is None else m.shape[0]
        Mt = np.concatenate(mtabs, axis=0)
        Mi = np.stack([np.full(len(pidx[0]), -1, dtype=np.int64) if m is None else mi + o
                       for m, mi, o in zip(minus, midx, moffs)])
    else:
        Mt = np.zeros((1, H, C))
        Mi = np.full((nf, len(pidx[0])), -1, dtype=np.int64)
    return T, P, Mt, Mi, offs


def _unpack(gT, gM, tables, minus):
    grads_plus, grads_minus = [], []
    off = 0
    for t in tables:
        grads_plus.append(gT[off:off + t.shape[0]])
        off += t.shape[0]
    off = 0
    for m in minus:
        if m is None:
            grads_minus.append(None)
        else:
            grads_minus.append(gM[off:off + m.shape[0]])
            off += m.shape[0]
    return grads_plus, grads_minus


# ---------------------------------------------------------------------------
# numpy reference
# ---------------------------------------------------------------------------

def _gather_factors(tables, pidx, minus, midx):
    out = []
    for t, p, m, mi in zip(tables, pidx, minus, midx):
        g = t[p]
        if m is not None:
            g = g - m[mi]
        out.append(g)
    return out


def lowrank_forward_np(tables, pidx, minus, midx, rank, bias):
    G = _gather_factors(tables, pidx, minus, midx)
    C = tables[0].shape[2]
    out = np.zeros(G[0].shape[:2])
    if rank > 0:
        prod = G[0][:, :, :rank].copy()
        for g in G[1:]:
            prod *= g[:, :, :rank]
        out += prod.sum(axis=2)
    for g in G:
        out += g[:, :, C - 1]
    return out + bias


def lowrank_backward_np(grad, tables, pidx, minus, midx, rank):
    from .numcore.ops import scatter_rows

    G = _gather_factors(tables, pidx, minus, midx)
    C = tables[0].shape[2]
    grads_plus, grads_minus = [], []
    for f, (t, p, m, mi) in enumerate(zip(tables, pidx, minus, midx)):
        dG = np.zeros_like(G[f])
        if rank > 0:
            excl = np.ones_like(G[f][:, :, :rank])
            for f2, g in enumerate(G):
                if f2 != f:
                    excl *= g[:, :, :rank]
            dG[:, :, :rank] = grad[:, :, None] * excl
        dG[:, :, C - 1] = grad
        grads_plus.append(scatter_rows(dG, p, t.shape[0]))
        grads_minus.append(None if m is None else -scatter_rows(dG, mi, m.shape[0]))
    return grads_plus, grads_minus


def attend_forward_np(alpha, values, src, starts, n_dst):
    weighted = values[src] * alpha[:, :, None]
    return np.add.reduceat(weighted, starts, axis=0)


def attend_backward_np(grad, alpha, values, src, dst, need_alpha, need_values):
    from .numcore.ops import scatter_rows

    ge = grad[dst]
    ga = np.einsum("ehk,ehk->eh", ge, values[src]) if need_alpha else None
    gv = scatter_rows(ge * alpha[:, :, None], src, values.shape[0]) if need_values else None
    return ga, gv


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _lr_fwd(T, P, Mt, Mi, rank, bias):
        nf, E = P.shape
        H, C = T.shape[1], T.shape[2]
        out = np.empty((E, H))
        for e in range(E):
            for h in range(H):
                acc = 0.0
                for r in range(rank):
                    prod = 1.0
                    for f in range(nf):
                        v = T[P[f, e], h, r]
                        if Mi[f, e] >= 0:
                            v -= Mt[Mi[f, e], h, r]
                        prod *= v
                    acc += prod
                for f in range(nf):
                    v = T[P[f, e], h, C - 1]
                    if Mi[f, e] >= 0:
                        v -= Mt[Mi[f, e], h, C - 1]
                    acc += v
                out[e, h] = acc + bias[h]
        return out

    @_jit
    def _lr_bwd(G, T, P, Mt, Mi, rank):
        nf, E = P.shape
        H, C = T.shape[1], T.shape[2]
        gT = np.zeros(T.shape)
        gM = np.zeros(Mt.shape)
        vals = np.empty(nf)
        suffix = np.empty(nf + 1)
        for e in range(E):
            for h in range(H):
                g = G[e, h]
                for r in range(rank):
                    for f in range(nf):
                        v = T[P[f, e], h, r]
                        if Mi[f, e] >= 0:
                            v -= Mt[Mi[f, e], h, r]
                        vals[f] = v
                    # leave-one-out products as prefix * suffix
                    suffix[nf] = 1.0
                    for f in range(nf - 1, -1, -1):
                        suffix[f] = suffix[f + 1] * vals[f]
                    prefix = g
                    for f in range(nf):
                        prod = prefix * suffix[f + 1]
                        prefix *= vals[f]
                        gT[P[f, e], h, r] += prod
                        if Mi[f, e] >= 0:
                            gM[Mi[f, e], h, r] -= prod
                for f in range(nf):
                    gT[P[f, e], h, C - 1] += g
                    if Mi[f, e] >= 0:
                        gM[Mi[f, e], h, C - 1] -= g
        return gT, gM

    @_jit
    def _att_fwd(alpha, values, src, starts, n_dst):
        E, H = alpha.shape
        K = values.shape[2]
        out = np.zeros((n_dst, H, K))
        for i in range(n_dst):
            stop = starts[i + 1] if i + 1 < n_dst else E
            for e in range(starts[i], stop):
                j = src[e]
                for h in range(H):
                    a = alpha[e, h]
                    for k in range(K):
                        out[i, h, k] += a * values[j, h, k]
        return out

    @_jit
    def _att_bwd(grad, alpha, values, src, dst):
        E, H = alpha.shape
        K = values.shape[2]
        ga = np.empty((E, H))
        gv = np.zeros(values.shape)
        for e in range(E):
            i, j = dst[e], src[e]
            for h in range(H):
                acc = 0.0
                a = alpha[e, h]
                for k in range(K):
                    acc += grad[i, h, k] * values[j, h, k]
                    gv[j, h, k] += a * grad[i, h, k]
                ga[e, h] = acc
        return ga, gv


def lowrank_forward(tables, pidx, minus, midx, rank, bias):
    if _BACKEND == "numpy":
        return lowrank_forward_np(tables, pidx, minus, midx, rank, bias)
    T, P, Mt, Mi, _ = _pack(tables, pidx, minus, midx)
    return _lr_fwd(T, P, Mt, Mi, rank, np.ascontiguousarray(bias))


def lowrank_backward(grad, tables, pidx, minus, midx, rank):
    if _BACKEND == "numpy":
        return lowrank_backward_np(grad, tables, pidx, minus, midx, rank)
    T, P, Mt, Mi, _ = _pack(tables, pidx, minus, midx)
    gT, gM = _lr_bwd(np.ascontiguousarray(grad), T, P, Mt, Mi, rank)
    return _unpack(gT, gM, tables, minus)


def attend_forward(alpha, values, src, starts, n_dst):
    if _BACKEND == "numpy":
        return attend_forward_np(alpha, values, src, starts, n_dst)
    return _att_fwd(np.ascontiguousarray(alpha), np.ascontiguousarray(values), src, starts, n_dst)


def attend_backward(grad, alpha, values, src, dst, need_alpha=True, need_values=True):
    if _BACKEND == "numpy":
        return attend_backward_np(grad, alpha, values, src, dst, need_alpha, need_values)
    ga, gv = _att_bwd(np.ascontiguousarray(grad), np.ascontiguousarray(alpha),
                      np.ascontiguousarray(values), src, dst)
    return (ga if need_alpha else None), (gv if need_values else None)
