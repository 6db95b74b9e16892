import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clinpoint import _kernels
from clinpoint.hierarchy import LEVELS, level_edges
from clinpoint.lrra import (DIMENSIONS, Edges, Factor, LowRankCoupling, LrrlLayer, attend, benchmark_coupling,
                            couple, dense_reference, edge_logits, full_tensor_oracle)
from clinpoint.nn import ParamStore
from clinpoint.numcore import Parameter, Tensor, grad_check, ops
from clinpoint.relations import RelationFeatures

from helpers import random_cloud

ALL_SUBSETS = [tuple(s) for r in range(1, 5) for s in itertools.combinations(DIMENSIONS, r)]


def _coupling(dims, rank, d, heads=1, seed=0, coupled=True):
    cp = LowRankCoupling(ParamStore(np.random.default_rng(seed)), "cp", dims, rank, d, heads, coupled)
    rng = np.random.default_rng(seed + 1)
    for k in cp.dims:
        cp.w[k].data[...] = rng.normal(size=cp.w[k].shape)
    cp.b.data[...] = rng.normal(size=cp.b.shape)
    return cp


def _rel(rng, dims, d):
    return RelationFeatures(**{f"r_{k}": rng.normal(size=d) for k in dims})


def test_fifteen_dimension_subsets():
    assert len(ALL_SUBSETS) == 15


def test_couple_rank1_single_dim_hand_value():
    cp = _coupling(("h",), 1, 2)
    cp.Q["h"].data[...] = [[[1.0, 2.0]]]
    cp.w["h"].data[...] = [[0.5, 0.0]]
    cp.b.data[...] = 0.25
    rel = RelationFeatures(r_h=np.array([3.0, -1.0]))
    # <Q, r> + <w, r> + b = 1 + 1.5 + 0.25
    assert couple(rel, cp)[0] == 2.75


def test_coupled_flag_and_rank_zero_drop_product_term():
    rng = np.random.default_rng(3)
    rel = _rel(rng, ("h", "t"), 4)
    a = _coupling(("h", "t"), 3, 4, coupled=False)
    b = _coupling(("h", "t"), 0, 4)
    unary_a = sum(np.dot(a.w[k].data[0], rel.get(k)) for k in a.dims) + a.b.data[0]
    assert couple(rel, a)[0] == pytest.approx(unary_a, abs=1e-14)
    assert couple(rel, a)[0] == pytest.approx(full_tensor_oracle(rel, a)[0], abs=1e-14)
    assert couple(rel, b)[0] == pytest.approx(full_tensor_oracle(rel, b)[0], abs=1e-14)


@pytest.mark.parametrize("dims", ALL_SUBSETS)
def test_couple_matches_full_tensor_oracle(dims):
    rng = np.random.default_rng(hash(dims) % 2 ** 32)
    for d in (1, 2, 3, 4):
        for rank in (1, 2, 3):
            cp = _coupling(dims, rank, d, seed=int(rng.integers(1 << 30)))
            for _ in range(10):
                rel = _rel(rng, dims, d)
                ref = full_tensor_oracle(rel, cp)
                assert np.all(np.abs(couple(rel, cp) - ref) <= 1e-12 * (1 + np.abs(ref)))


def test_oracle_limits():
    cp = _coupling(("h",), 1, 14, heads=2)
    with pytest.raises(ValueError, match="oracle limited"):
        full_tensor_oracle(_rel(np.random.default_rng(0), ("h",), 14), cp)


def test_relation_dims_must_match_coupling():
    cp = _coupling(("h", "t"), 2, 3)
    with pytest.raises(ValueError, match="relation features cover"):
        couple(_rel(np.random.default_rng(0), ("h", "t", "m"), 3), cp)


class _SpyFeatures(RelationFeatures):
    def __init__(self, dims, d, rng):
        super().__init__(**{f"r_{k}": rng.normal(size=d) for k in dims})
        object.__setattr__(self, "touched", set())

    def get(self, dim):
        self.touched.add(dim)
        return super().get(dim)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(ALL_SUBSETS), st.integers(0, 3), st.integers(0, 2 ** 31))
def test_coupling_reads_only_active_dims(dims, rank, seed):
    rng = np.random.default_rng(seed)
    spy = _SpyFeatures(dims, 4, rng)
    couple(spy, _coupling(dims, rank, 4, heads=2))
    assert spy.touched <= set(dims)


@pytest.mark.parametrize("level", [1, 2, 3, 4, 5])
def test_level_layers_own_exactly_their_dims(level):
    store = ParamStore(np.random.default_rng(level))
    layer = LrrlLayer(store, "l", 4, LEVELS[level].dims, 2, 2, 2)
    dims = set(LEVELS[level].dims)
    assert set(layer.coupling.Q) == dims and set(layer.coupling.w) == dims
    rp = layer.relations
    owned = {k for k, v in (("h", rp.W_Q), ("t", rp.phi_t), ("m", rp.E_m), ("c", rp.case_gru)) if v is not None}
    assert owned == dims


def test_heads_use_disjoint_chunks():
    cp = _coupling(("h", "t"), 2, 4, heads=2)
    rng = np.random.default_rng(4)
    rel = _rel(rng, ("h", "t"), 4)
    base = couple(rel, cp)
    rel.r_h[2:] += 10.0   # only head 1 sees the second half
    moved = couple(rel, cp)
    assert moved[0] == base[0] and moved[1] != base[1]


# ---------------------------------------------------------------------------
# fused kernels
# ---------------------------------------------------------------------------

def _factor_case(rng, E=40, H=3, C=4, with_minus=(True, False, True)):
    factors = []
    for wm in with_minus:
        K = int(rng.integers(3, 9))
        plus = Parameter(rng.normal(size=(K, H, C)), f"p{len(factors)}")
        idx = rng.integers(0, K, size=E)
        if wm:
            Km = int(rng.integers(2, 7))
            factors.append(Factor(plus, idx, Parameter(rng.normal(size=(Km, H, C)), f"m{len(factors)}"),
                                  rng.integers(0, Km, size=E)))
        else:
            factors.append(Factor(plus, idx))
    return factors, Parameter(rng.normal(size=H), "b")


@pytest.mark.parametrize("rank", [0, 1, 3])
def test_edge_logits_backends_agree_and_match_dense(rank):
    rng = np.random.default_rng(rank)
    factors, bias = _factor_case(rng, C=rank + 1)
    vals = []
    for name in ("numpy", "numba"):
        _kernels.set_backend(name)
        try:
            vals.append(edge_logits(factors, bias, rank).data)
        finally:
            _kernels.set_backend("numba")
    np.testing.assert_allclose(vals[0], vals[1], rtol=1e-13, atol=1e-13)
    # direct dense evaluation
    G = [f.plus.data[f.plus_idx] - (f.minus.data[f.minus_idx] if f.minus is not None else 0) for f in factors]
    prod = np.ones(G[0].shape[:2] + (rank,))
    for g in G:
        prod = prod * g[:, :, :rank]
    ref = prod.sum(-1) + sum(g[:, :, rank] for g in G) + bias.data
    np.testing.assert_allclose(vals[1], ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_edge_logits_and_attend_gradients(backend):
    rng = np.random.default_rng(11)
    factors, bias = _factor_case(rng, E=12, H=2, C=3)
    edges = Edges(np.repeat(np.arange(4), 3), rng.integers(0, 7, size=12), 4)
    values = Parameter(rng.normal(size=(7, 2, 3)), "v")
    w = rng.normal(size=(4, 2, 3))
    params = [bias, values] + [f.plus for f in factors] + [f.minus for f in factors if f.minus is not None]

    def fn():
        e = edge_logits(factors, bias, 2)
        alpha = ops.segment_softmax(e, edges.starts, edges.dst)
        return ops.sum(ops.mul(attend(alpha, values, edges), w))

    _kernels.set_backend(backend)
    try:
        report = grad_check(fn, params)
    finally:
        _kernels.set_backend("numba")
    assert report.passed, report.summary()


def test_attend_backends_agree():
    rng = np.random.default_rng(12)
    edges = Edges(np.repeat(np.arange(6), 4), rng.integers(0, 9, size=24), 6)
    alpha, v = rng.random((24, 3)), rng.normal(size=(9, 3, 2))
    g = rng.normal(size=(6, 3, 2))
    out = []
    for name in ("numpy", "numba"):
        _kernels.set_backend(name)
        try:
            out.append(_kernels.attend_forward(alpha, v, edges.src, edges.starts, 6))
            out.append(_kernels.attend_backward(g, alpha, v,
                                                edges.src, edges.dst))
        finally:
            _kernels.set_backend("numba")
    np.testing.assert_allclose(out[0], out[2], rtol=1e-13)
    np.testing.assert_allclose(out[1][0], out[3][0], rtol=1e-13)
    np.testing.assert_allclose(out[1][1], out[3][1], rtol=1e-13)


def test_edges_validation():
    with pytest.raises(ValueError, match="sorted"):
        Edges(np.array([1, 0]), np.array([0, 0]), 2)
    with pytest.raises(ValueError, match="empty neighborhood"):
        Edges(np.array([0, 0]), np.array([0, 1]), 2)
    e = Edges.from_lists([[0, 2], [1]])
    assert [x.tolist() for x in e.to_lists()] == [[0, 2], [1]]


# ---------------------------------------------------------------------------
# full layer against the O(N^2) reference
# ---------------------------------------------------------------------------

def _case_table_dict(layer, cloud, blocks, avail):
    from clinpoint.relations import case_relation_table

    B = cloud.num_cases
    table = case_relation_table(blocks, avail, layer.relations).data
    return {(i, j): table[i * B + j] for i in range(B) for j in range(B)}


@pytest.mark.parametrize("level", [1, 2, 3, 5])
def test_layer_matches_dense_reference(level):
    rng = np.random.default_rng(20 + level)
    cloud = random_cloud(rng, n=18, d=8, observed_rate=1.0 if level == 1 else 0.8)
    layer = LrrlLayer(ParamStore(rng), "l", 8, LEVELS[level].dims, rank=3, heads=2, num_modalities=2)
    for k in layer.dims:
        layer.coupling.w[k].data[...] = rng.normal(scale=0.3, size=layer.coupling.w[k].shape)
    edges = level_edges(cloud, level, delta=3.0, k_max=4)
    fast = layer(cloud, edges).out.data
    ref = dense_reference(layer, cloud, edges.to_lists())
    np.testing.assert_allclose(fast, ref, rtol=1e-10, atol=1e-11)


def test_cross_sample_layer_matches_dense_reference():
    from clinpoint.pointcloud import PointCloud

    rng = np.random.default_rng(30)
    B, T, d = 3, (3, 2), 8
    times = np.tile(np.r_[np.arange(T[0]) * 4.0, np.arange(T[1]) * 6.0], B)
    mods = np.tile(np.r_[np.zeros(T[0], int), np.ones(T[1], int)], B)
    cases = np.repeat(np.arange(B), sum(T))
    avail = np.array([[1, 1], [1, 0], [0, 1]], dtype=bool)
    cloud = PointCloud(Tensor(rng.normal(size=(len(times), d))), times, mods, cases, avail[cases, mods], B, 2)
    layer = LrrlLayer(ParamStore(rng), "l4", d, LEVELS[4].dims, rank=2, heads=2, num_modalities=2)

    def blocks(hn):
        cube = hn.data.reshape(B, sum(T), d)
        return [Tensor(cube[:, :T[0]]), Tensor(cube[:, T[0]:])]

    edges = level_edges(cloud, 4)
    fast = layer(cloud, edges, case_blocks=lambda hn: [ops.reshape(ops.take(hn, np.arange(len(times))),
                                                                   (B, sum(T), d))[:, :T[0], :],
                                                       ops.reshape(hn, (B, sum(T), d))[:, T[0]:, :]],
                 availability=avail).out.data
    hn = layer.ln_attn(cloud.tokens)
    ref = dense_reference(layer, cloud, edges.to_lists(), _case_table_dict(layer, cloud, blocks(hn), avail))
    np.testing.assert_allclose(fast, ref, rtol=1e-10, atol=1e-11)


def test_layer_gradients_through_all_parameters():
    rng = np.random.default_rng(40)
    cloud = random_cloud(rng, n=10, d=4, observed_rate=1.0)
    store = ParamStore(rng)
    layer = LrrlLayer(store, "l", 4, LEVELS[3].dims, rank=2, heads=2, num_modalities=2, rec=True)
    edges = level_edges(cloud, 3)
    w = rng.normal(size=(10, 4))

    def fn():
        res = layer(cloud, edges)
        return ops.add(ops.sum(ops.mul(res.out, w)), ops.sum(ops.square(res.rec)))

    report = grad_check(fn, list(store), coords_per_param=6)
    assert report.passed, report.summary()


# ---------------------------------------------------------------------------
# complexity counters
# ---------------------------------------------------------------------------

def test_benchmark_rows_agree_numerically():
    row = benchmark_coupling(3, 2, 3, pairs=5)
    assert row.max_abs_diff < 1e-10
    assert row.coupled_flops < row.oracle_flops


def test_coupled_count_linear_in_rank():
    counts = [benchmark_coupling(4, r, 3, pairs=2).coupled_flops for r in (1, 2, 4, 8)]
    slope = np.diff(counts) / np.diff([1, 2, 4, 8])
    assert np.allclose(slope, slope[0])


@pytest.mark.parametrize("rank", [1, 2, 4, 8])
@pytest.mark.parametrize("d", [2, 3, 4])
def test_oracle_count_grows_by_d_per_dimension(d, rank):
    c3 = benchmark_coupling(d, rank, 3, pairs=1).oracle_flops
    c4 = benchmark_coupling(d, rank, 4, pairs=1).oracle_flops
    assert abs(c4 / c3 / d - 1) <= 0.1
