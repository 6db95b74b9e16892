"""Classifier heads, supervised losses, the weighted training objective,
lowest-entropy inference and ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.stats import rankdata

from .nn import Linear, ParamStore
from .numcore import Tensor, ops
from .pointcloud import EventBatch, PointCloud
from .sampling import GridLayout

if TYPE_CHECKING:
    from .hierarchy import LayerOutputs


class Heads:
    """Shared fusion classifier over concatenated last-anchor tokens and one
    classifier per modality over mean-pooled fine-grid tokens."""

    def __init__(self, store: ParamStore, d: int, num_modalities: int, num_classes: int = 2):
        self.fusion = Linear(store, "head.fusion", d * num_modalities, num_classes)
        self.modality = [Linear(store, f"head.m{m}", d, num_classes) for m in range(num_modalities)]


# ---------------------------------------------------------------------------
# case summaries
# ---------------------------------------------------------------------------

def fuse(cloud: PointCloud, layout: GridLayout) -> Tensor:
    """``(B, d * M)``: each modality's last-anchor token, in modality order."""
    parts = [ops.take(cloud.tokens, layout.last(m)) for m in layout.modalities]
    return ops.concat(parts, axis=1)


def fuse_case(cloud: PointCloud, layout: GridLayout, case: int) -> Tensor:
    parts = [ops.take(cloud.tokens, layout.last(m)[case:case + 1]) for m in layout.modalities]
    return ops.reshape(ops.concat(parts, axis=1), (-1,))


def modality_means(cloud: PointCloud, layout: GridLayout) -> list[Tensor]:
    """Per-modality ``(B, d)`` averages over each block's anchors."""
    return [ops.mean(block, axis=1) for block in layout.blocks(cloud.tokens)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _ce(logits: Tensor, rows: np.ndarray, labels: np.ndarray, normalize: bool) -> Tensor:
    if not len(rows):
        return Tensor(np.zeros(()))
    # labels of unselected rows are never read
    per = ops.cross_entropy(ops.take(logits, rows), labels[rows].astype(np.int64))
    return ops.mean(per) if normalize else ops.sum(per)


def supervised_losses(outputs: "LayerOutputs", batch: EventBatch, heads: Heads,
                      normalize: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Global-branch, complete-case fusion-branch and per-modality losses.

    Each family averages over its contributing (case[, modality]) terms when
    ``normalize``; otherwise it is the plain sum. Empty families give 0.
    """
    labeled = np.asarray(batch.label_mask, dtype=bool)
    mu = outputs.availability
    y = batch.labels
    L_g = _ce(heads.fusion(fuse(outputs.h5, outputs.coarse)), np.flatnonzero(labeled), y, normalize)
    complete = labeled & mu.all(axis=1)
    L_f = _ce(heads.fusion(fuse(outputs.h3, outputs.fine)), np.flatnonzero(complete), y, normalize)
    terms = []
    for m, pooled in enumerate(modality_means(outputs.h2, outputs.fine)):
        rows = np.flatnonzero(labeled & mu[:, m])
        if len(rows):
            terms.append(ops.cross_entropy(ops.take(heads.modality[m](pooled), rows),
                                           y[rows].astype(np.int64)))
    if terms:
        allterms = ops.concat(terms, axis=0)
        L_s = ops.mean(allterms) if normalize else ops.sum(allterms)
    else:
        L_s = Tensor(np.zeros(()))
    return L_g, L_f, L_s


def total_loss(L_g, L_f, L_s, L_a, L_r, lambda_a: float, lambda_r: float):
    """``(L_g + L_f + L_s) + (lambda_a * L_a + lambda_r * L_r)``; works on
    floats and tensors alike. The fixed grouping makes the sum reproducible."""
    return ((L_g + L_f) + L_s) + (lambda_a * L_a + lambda_r * L_r)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

GLOBAL, FUSION = "global", "fusion"


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy along the last axis, with ``0 log 0 = 0``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class BranchPredictions:
    """Per-branch class probabilities for every case of a batch."""

    tags: list[str]              # candidate names, global branch first
    probs: np.ndarray            # (K, B, classes)
    available: np.ndarray        # (K, B) whether the branch is a candidate for the case


def branch_predictions(outputs: "LayerOutputs", heads: Heads) -> BranchPredictions:
    mu = outputs.availability
    B, M = mu.shape
    tags = [GLOBAL, FUSION]
    logits = [heads.fusion(fuse(outputs.h5, outputs.coarse)).data,
              heads.fusion(fuse(outputs.h3, outputs.fine)).data]
    avail = [np.ones(B, bool), np.ones(B, bool)]
    for m, pooled in enumerate(modality_means(outputs.h2, outputs.fine)):
        tags.append(f"modality{m}")
        logits.append(heads.modality[m](pooled).data)
        avail.append(mu[:, m].astype(bool))
    return BranchPredictions(tags, np.stack([_softmax(l) for l in logits]), np.stack(avail))


def select_lowest_entropy(preds: BranchPredictions) -> tuple[np.ndarray, list[str]]:
    """Per case, the candidate with minimal entropy; ties resolve to the
    earliest tag, which is the global branch."""
    ent = np.where(preds.available, entropy(preds.probs), np.inf)
    choice = np.argmin(ent, axis=0)
    B = preds.probs.shape[1]
    probs = preds.probs[choice, np.arange(B)]
    return probs, [preds.tags[k] for k in choice]


def entropy_inference(outputs: "LayerOutputs", heads: Heads, case: int | None = None):
    """Positive-class probability and chosen branch, for one case or all."""
    probs, tags = select_lowest_entropy(branch_predictions(outputs, heads))
    if case is None:
        return probs[:, 1], tags
    return float(probs[case, 1]), tags[case]


def predict(outputs: "LayerOutputs", heads: Heads, branch: str = "entropy") -> np.ndarray:
    if branch == "entropy":
        return entropy_inference(outputs, heads)[0]
    if branch == GLOBAL:
        return branch_predictions(outputs, heads).probs[0, :, 1]
    raise ValueError(f"branch must be 'entropy' or 'global', got {branch!r}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class MetricError(ValueError):
    pass


def _check(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise MetricError(f"probs {probs.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError("AUROC/AUPRC are undefined for a single-class label set")
    return probs, labels


def auroc(probs, labels) -> float:
    """Mann-Whitney statistic with average ranks for ties."""
    probs, labels = _check(probs, labels)
    ranks = rankdata(probs, method="average")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(probs, labels) -> float:
    """Average precision: ``sum_k (R_k - R_{k-1}) P_k`` over distinct scores
    in decreasing order."""
    probs, labels = _check(probs, labels)
    order = np.argsort(-probs, kind="stable")
    p, y = probs[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(p) != 0), len(p) - 1]
    n_pos = int(tp[-1])
    ap, prev = 0.0, 0.0
    for k in last:
        recall = tp[k] / n_pos
        ap += (recall - prev) * (tp[k] / (tp[k] + fp[k]))
        prev = recall
    return float(ap)


def f1_score(probs, labels, threshold: float = 0.5) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pred = probs >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def metrics(probs, labels) -> dict[str, float]:
    return {"auroc": auroc(probs, labels), "auprc": auprc(probs, labels), "f1": f1_score(probs, labels)}
