import dataclasses
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clinpoint.nn import ParamStore
from clinpoint.numcore import Tape, Tensor, ops
from clinpoint.objectives import (BranchPredictions, Heads, MetricError, auprc, auroc, branch_predictions, entropy,
                                  entropy_inference, f1_score, fuse, fuse_case, metrics, predict,
                                  select_lowest_entropy, supervised_losses, total_loss)
from clinpoint.training import TrainingConfig, compute_losses

from helpers import brute_auprc, brute_auroc, random_batch, tiny_model


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", range(2, 11))
def test_metrics_match_brute_force_on_every_labeling(n):
    rng = np.random.default_rng(n)
    # coarse values so ties are common
    probs = np.round(rng.random(n), 1)
    for bits in itertools.product((0, 1), repeat=n):
        if 0 < sum(bits) < n:
            assert auroc(probs, bits) == brute_auroc(probs.tolist(), bits)
            assert auprc(probs, bits) == brute_auprc(probs.tolist(), bits)


def test_metric_examples():
    m = metrics([0.9, 0.8, 0.1], [1, 1, 0])
    assert m == {"auroc": 1.0, "auprc": 1.0, "f1": 1.0}
    assert auroc(np.full(7, 0.3), [1, 0, 1, 0, 0, 1, 1]) == 0.5
    assert auroc([0.1, 0.9], [1, 0]) == 0.0


def test_shuffled_scores_are_near_chance():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=4000)
    assert abs(auroc(rng.permutation(labels.astype(float)), labels) - 0.5) <= 0.05


def test_single_class_is_an_error():
    for labels in ([1, 1, 1], [0, 0]):
        with pytest.raises(MetricError):
            auroc(np.linspace(0, 1, len(labels)), labels)
        with pytest.raises(MetricError):
            auprc(np.linspace(0, 1, len(labels)), labels)


def test_f1_threshold():
    assert f1_score([0.5, 0.49], [1, 0]) == 1.0
    assert f1_score([0.2, 0.3], [1, 1]) == 0.0
    assert f1_score([0.7, 0.7, 0.1], [1, 0, 1]) == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# entropy inference
# ---------------------------------------------------------------------------

def _preds(probs, available=None):
    probs = np.asarray(probs, float)
    K, B = probs.shape[:2]
    available = np.ones((K, B), bool) if available is None else np.asarray(available, bool)
    tags = ["global", "fusion"] + [f"modality{m}" for m in range(K - 2)]
    return BranchPredictions(tags, probs, available)


def test_entropy_values():
    np.testing.assert_allclose(entropy(np.array([[0.5, 0.5], [1.0, 0.0]])), [math.log(2), 0.0])


def test_lowest_entropy_selected():
    p = _preds([[[0.5, 0.5]], [[1.0, 0.0]], [[0.6, 0.4]]])
    probs, tags = select_lowest_entropy(p)
    assert tags == ["fusion"] and probs[0].tolist() == [1.0, 0.0]


def test_ties_go_to_global_branch():
    p = _preds([[[0.3, 0.7]], [[0.7, 0.3]], [[0.3, 0.7]], [[0.7, 0.3]]])
    assert select_lowest_entropy(p)[1] == ["global"]


def test_unavailable_modalities_are_not_candidates():
    p = _preds([[[0.5, 0.5]], [[0.5, 0.5]], [[1.0, 0.0]], [[0.9, 0.1]]],
               available=[[1], [1], [0], [1]])
    assert select_lowest_entropy(p)[1] == ["modality1"]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_selection_is_argmin_of_recomputed_entropy(seed):
    rng = np.random.default_rng(seed)
    K, B = 4, 6
    logits = rng.normal(size=(K, B, 2)) * rng.uniform(0.1, 5.0, size=(K, 1, 1))
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    avail = np.ones((K, B), bool)
    avail[2:] = rng.random((2, B)) < 0.6
    p = _preds(probs, avail)
    chosen, tags = select_lowest_entropy(p)
    for b in range(B):
        ent = [entropy(probs[k, b]) if avail[k, b] else np.inf for k in range(K)]
        k = int(np.argmin(ent))
        assert tags[b] == p.tags[k] and chosen[b].tobytes() == probs[k, b].tobytes()


def test_entropy_inference_on_model_outputs():
    model = tiny_model(seed=1)
    batch = random_batch(np.random.default_rng(3), cases=4, missing=0.5)
    out = model(batch, "eval")
    probs, tags = entropy_inference(out, model.heads)
    bp = branch_predictions(out, model.heads)
    assert len(tags) == 4 and probs.shape == (4,)
    for c in range(4):
        assert entropy_inference(out, model.heads, case=c) == (probs[c], tags[c])
        if tags[c].startswith("modality"):
            assert batch.availability[c, int(tags[c][-1])]
    # a single observed modality leaves three candidates
    single = ~batch.availability.all(axis=1)
    assert (bp.available[:, single].sum(axis=0) == 3).all()
    np.testing.assert_array_equal(predict(out, model.heads, "global"), bp.probs[0, :, 1])
    with pytest.raises(ValueError):
        predict(out, model.heads, "best")


# ---------------------------------------------------------------------------
# case summaries
# ---------------------------------------------------------------------------

def test_fuse_layout():
    model = tiny_model(d=3, heads=1)
    batch = random_batch(np.random.default_rng(4), cases=3, missing=0.0)
    out = model(batch, "eval")
    u = fuse(out.h5, out.coarse).data
    assert u.shape == (3, 6)
    for c in range(3):
        manual = np.concatenate([out.h5.tokens.data[out.coarse.block(c, m)[-1]] for m in range(2)])
        assert u[c].tobytes() == manual.tobytes()
        assert fuse_case(out.h5, out.coarse, c).data.tobytes() == manual.tobytes()
        np.testing.assert_array_equal(manual[:3], out.h5.tokens.data[out.h5.positions(c, 0)[-1]])


def test_fusion_summary_independent_of_case_order():
    model = tiny_model(seed=2)
    batch = random_batch(np.random.default_rng(5), cases=4)
    perm = np.array([2, 0, 3, 1])
    a = fuse(model(batch, "eval").h3, model(batch, "eval").fine).data
    sub = batch.subset(perm)
    out = model(sub, "eval")
    b = fuse(out.h3, out.fine).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-13)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _zero_heads(model):
    for lin in [model.heads.fusion] + model.heads.modality:
        lin.W.data[...] = 0.0
        lin.b.data[...] = 0.0


def test_uniform_logits_give_ln2_and_counts():
    model = tiny_model()
    _zero_heads(model)
    batch = random_batch(np.random.default_rng(6), cases=6, missing=0.5, label_missing=0.3)
    out = model(batch, "eval")
    lab, mu = batch.label_mask, batch.availability
    n_g, n_f, n_s = lab.sum(), (lab & mu.all(axis=1)).sum(), (lab[:, None] & mu).sum()
    L = supervised_losses(out, batch, model.heads, normalize=False)
    ln2 = math.log(2)
    for val, count in zip(L, (n_g, n_f, n_s)):
        assert val.item() == pytest.approx(count * ln2, rel=1e-14)
    for val in supervised_losses(out, batch, model.heads, normalize=True):
        assert val.item() == pytest.approx(ln2, rel=1e-14)


def test_case_missing_a_modality_skips_fusion_loss():
    from clinpoint.pointcloud import ClinicalEvent, EventBatch
    ev = [ClinicalEvent(np.ones(3), 1.0, 0, 0), ClinicalEvent(np.ones(2), 2.0, 1, 0),
          ClinicalEvent(np.ones(3), 3.0, 0, 1)]
    batch = EventBatch.from_events(ev, {0: (1, True), 1: (0, True)}, 2, 48.0, (3, 2))
    model = tiny_model()
    _zero_heads(model)
    L_g, L_f, L_s = supervised_losses(model(batch, "eval"), batch, model.heads, normalize=False)
    ln2 = math.log(2)
    assert L_g.item() == pytest.approx(2 * ln2)
    assert L_f.item() == pytest.approx(ln2)        # only case 0 is complete
    assert L_s.item() == pytest.approx(3 * ln2)    # (0,0), (0,1), (1,0)


def test_no_labels_no_supervised_loss():
    model = tiny_model()
    batch = random_batch(np.random.default_rng(7), cases=3, label_missing=1.0)
    for val in supervised_losses(model(batch, "eval"), batch, model.heads):
        assert val.item() == 0.0


def test_total_loss_arithmetic():
    assert total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 0.002, 10.0) == 13.002
    assert total_loss(0.5, 0.25, 2.0, 7.0, 9.0, 0.0, 0.0) == 2.75


def _grads(model, batch, cfg):
    for p in model.params:
        p.zero_grad()
    with Tape() as tape:
        terms = compute_losses(model(batch, "train"), batch, model, cfg)
        tape.backward(terms.L_total)
    grads = {p.name: (None if p.grad is None else p.grad.copy()) for p in model.params}
    return terms, grads


def test_unlabeled_labels_never_matter_bitwise():
    model = tiny_model(seed=8)
    batch = random_batch(np.random.default_rng(8), cases=6, label_missing=0.5)
    assert (~batch.label_mask).any()
    cfg = TrainingConfig()
    flipped = batch.labels.copy()
    flipped[~batch.label_mask] ^= 1
    t1, g1 = _grads(model, batch, cfg)
    t2, g2 = _grads(model, batch.with_labels(flipped), cfg)
    assert t1.values() == t2.values()
    for name in g1:
        assert (g1[name] is None and g2[name] is None) or g1[name].tobytes() == g2[name].tobytes(), name


def test_total_gradient_is_sum_of_parts():
    model = tiny_model(seed=9)
    batch = random_batch(np.random.default_rng(9), cases=4)
    cfg = TrainingConfig(lambda_a=0.3, lambda_r=2.0)
    _, total = _grads(model, batch, cfg)
    parts = {}
    for key, over in {"sup": dict(lambda_a=0.0, lambda_r=0.0),
                      "a": dict(lambda_a=0.3, lambda_r=0.0),
                      "r": dict(lambda_a=0.0, lambda_r=2.0)}.items():
        parts[key] = _grads(model, batch, dataclasses.replace(cfg, **over))[1]
    for name, g in total.items():
        if g is None:
            continue
        sup = parts["sup"][name]
        a = parts["a"][name] - sup
        r = parts["r"][name] - sup
        np.testing.assert_allclose(g, sup + a + r, rtol=1e-9, atol=1e-12, err_msg=name)


def test_fusion_loss_ignores_incomplete_cases():
    model = tiny_model(seed=10)
    batch = random_batch(np.random.default_rng(10), cases=5, missing=0.6)
    incomplete = ~batch.availability.all(axis=1)
    assert incomplete.any() and (~incomplete).any()
    out = model(batch, "eval")
    leaf = ParamStore(np.random.default_rng(0)).add("h3", out.h3.tokens.data.copy())
    out = dataclasses.replace(out, h3=out.h3.with_tokens(leaf))
    with Tape() as tape:
        tape.backward(supervised_losses(out, batch, model.heads)[1])
    rows = np.isin(out.h3.case, np.flatnonzero(incomplete))
    assert np.all(leaf.grad[rows] == 0.0)
    assert np.any(leaf.grad[~rows] != 0.0)


def test_heads_share_fusion_classifier():
    store = ParamStore(np.random.default_rng(0))
    heads = Heads(store, 4, 3)
    assert heads.fusion.W.shape == (12, 2)
    assert [h.W.shape for h in heads.modality] == [(4, 2)] * 3
    assert sum(1 for n in store.names() if n.startswith("head.fusion")) == 2
