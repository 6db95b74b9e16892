import numpy as np
import pytest

from clinpoint.nn import ParamStore
from clinpoint.numcore import Tape, Tensor, adamw_step, AdamWState, grad_check, ops
from clinpoint.relations import (BiGRU, RelationParams, case_relation, case_relation_table, content_relation,
                                 modality_relation, time_relation)


def _params(dims="htmc", d=4, M=2, seed=0, **kw):
    return RelationParams(ParamStore(np.random.default_rng(seed)), "rel", d, M, tuple(dims), **kw)


def test_content_relation_identity_and_zero_key():
    p = _params("h")
    p.W_Q.data[...] = np.eye(4)
    p.W_K.data[...] = np.eye(4)
    h = np.array([0.5, -1.0, 2.0, 3.0])
    assert np.all(content_relation(h, h, p).data == 0.0)
    p.W_K.data[...] = 0.0
    np.testing.assert_array_equal(content_relation(h, -h, p).data, h @ p.W_Q.data)


def test_content_relation_matches_direct_formula():
    p = _params("h", seed=3)
    rng = np.random.default_rng(1)
    hi, hj = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(content_relation(hi, hj, p).data, hi @ p.W_Q.data - hj @ p.W_K.data, rtol=1e-14)


def test_time_relation_hand_evaluated():
    p = _params("t", seed=2)
    mlp = p.phi_t.mlp
    dt = 3.5
    hidden = ops.gelu(Tensor(dt * mlp.fc1.W.data[0] + mlp.fc1.b.data)).data
    expect = hidden @ mlp.fc2.W.data + mlp.fc2.b.data
    np.testing.assert_allclose(time_relation(5.0, 1.5, p).data, expect, rtol=1e-13)
    # equal timestamps give the same constant vector regardless of position
    np.testing.assert_array_equal(time_relation(2.0, 2.0, p).data, time_relation(40.0, 40.0, p).data)


def test_time_relation_zero_weights_gives_constant():
    p = _params("t")
    mlp = p.phi_t.mlp
    for lin in (mlp.fc1, mlp.fc2):
        lin.W.data[...] = 0.0
    mlp.fc2.b.data[...] = 0.7
    np.testing.assert_array_equal(time_relation(9.0, 1.0, p).data, np.full(4, 0.7))


def test_modality_relation_lookup_and_range():
    p = _params("m", M=3)
    np.testing.assert_array_equal(modality_relation(1, 0, p).data, p.E_m.data[1, 0])
    with pytest.raises(IndexError):
        modality_relation(3, 0, p)


def test_modality_lookup_update_is_sparse():
    p = _params("m", M=3)
    before = p.E_m.data.copy()
    with Tape() as tape:
        tape.backward(ops.sum(ops.square(modality_relation(0, 1, p))))
    adamw_step(AdamWState(lr=0.1, weight_decay=0.0), [p.E_m])
    changed = np.any(p.E_m.data != before, axis=-1)
    expect = np.zeros((3, 3), dtype=bool)
    expect[0, 1] = True
    np.testing.assert_array_equal(changed, expect)


def test_single_modality_relation_is_constant():
    p = _params("m", M=1)
    assert modality_relation(0, 0, p).shape == (4,)


def _seqs(rng, lens=(5, 3), d=4):
    return [Tensor(rng.normal(size=(n, d))) for n in lens]


def test_case_relation_self_pair_is_zero_sequence_output():
    p = _params("c", seed=4)
    rng = np.random.default_rng(5)
    s = _seqs(rng)
    out = case_relation(s, s, [True, True], [True, True], p)
    z = [Tensor(np.zeros((5, 4))), Tensor(np.zeros((3, 4)))]
    expect = case_relation(z, [Tensor(np.zeros((5, 4))), Tensor(np.zeros((3, 4)))], [True, True], [True, True], p)
    np.testing.assert_array_equal(out.data, expect.data)


def test_case_relation_no_shared_modality_is_zero():
    p = _params("c")
    s = _seqs(np.random.default_rng(6))
    out = case_relation(s, s, [True, False], [False, True], p)
    assert np.all(out.data == 0.0)


def test_case_relation_is_mean_of_single_modality_results():
    p = _params("c", seed=7)
    rng = np.random.default_rng(8)
    a, b = _seqs(rng), _seqs(rng)
    both = case_relation(a, b, [True, True], [True, True], p).data
    r0 = case_relation(a, b, [True, False], [True, False], p).data
    r1 = case_relation(a, b, [False, True], [False, True], p).data
    np.testing.assert_allclose(both, (r0 + r1) / 2, rtol=1e-13, atol=1e-15)


def test_case_relation_requires_alignment():
    p = _params("c")
    rng = np.random.default_rng(9)
    with pytest.raises(ValueError, match="grid-aligned"):
        case_relation(_seqs(rng, (5, 3)), _seqs(rng, (4, 3)), [True, True], [True, True], p)


def test_case_table_equals_per_pair_evaluation():
    p = _params("c", seed=10)
    rng = np.random.default_rng(11)
    B = 3
    blocks = [Tensor(rng.normal(size=(B, 5, 4))), Tensor(rng.normal(size=(B, 3, 4)))]
    avail = np.array([[1, 1], [1, 0], [0, 1]], dtype=bool)
    table = case_relation_table(blocks, avail, p).data
    for ci in range(B):
        for cj in range(B):
            si = [Tensor(blocks[m].data[ci]) for m in range(2)]
            sj = [Tensor(blocks[m].data[cj]) for m in range(2)]
            ref = case_relation(si, sj, avail[ci], avail[cj], p).data
            np.testing.assert_allclose(table[ci * B + cj], ref, rtol=1e-12, atol=1e-14)


def test_bigru_reverse_direction_reads_backwards():
    store = ParamStore(np.random.default_rng(12))
    gru = BiGRU(store, "g", 3, 2, 4)
    x = np.random.default_rng(13).normal(size=(1, 6, 3))
    hf = gru._run(gru.cells[0], Tensor(x), reverse=False).data
    # running the forward cell on the reversed sequence equals running it reversed
    hb = gru._run(gru.cells[0], Tensor(x[:, ::-1].copy()), reverse=True).data
    np.testing.assert_allclose(hf, hb, rtol=1e-14)


@pytest.mark.parametrize("which", ["content", "time", "modality", "case"])
def test_extractors_grad_check(which):
    p = _params("htmc", seed=14)
    store_params = []
    rng = np.random.default_rng(15)
    hi = Tensor(rng.normal(size=4))
    seqs_a, seqs_b = _seqs(rng), _seqs(rng)
    w = rng.normal(size=4)
    if which == "content":
        fn, store_params = (lambda: ops.sum(ops.mul(ops.tanh(content_relation(hi, hi.data[::-1].copy(), p)), w)),
                            [p.W_Q, p.W_K])
    elif which == "time":
        fn = lambda: ops.sum(ops.mul(time_relation(7.0, 2.5, p), w))
        store_params = [p.phi_t.mlp.fc1.W, p.phi_t.mlp.fc1.b, p.phi_t.mlp.fc2.W, p.phi_t.mlp.fc2.b]
    elif which == "modality":
        fn, store_params = (lambda: ops.sum(ops.square(modality_relation(1, 0, p)))), [p.E_m]
    else:
        fn = lambda: ops.sum(ops.mul(case_relation(seqs_a, seqs_b, [True, True], [True, True], p), w))
        cell = p.case_gru.cells[0]
        store_params = [cell["Wx"], cell["Wh"], cell["bx"], cell["bh"], p.case_gru.out.W]
    report = grad_check(fn, store_params)
    assert report.passed, report.summary()
