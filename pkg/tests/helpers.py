"""Shared builders for random batches, clouds and small models."""

from __future__ import annotations

import numpy as np

from clinpoint.hierarchy import HierarchyModel, ModelConfig
from clinpoint.numcore import Tensor
from clinpoint.pointcloud import ClinicalEvent, EventBatch, PointCloud


def random_batch(rng: np.random.Generator, cases: int = 4, num_modalities: int = 2,
                 max_events: int = 40, feature_dims=(3, 2), horizon: float = 48.0,
                 missing: float = 0.3, label_missing: float = 0.0, grid_times: bool = False) -> EventBatch:
    """Random irregular batch with at most ``max_events`` events in total.

    ``grid_times`` snaps timestamps to whole hours so ties in time occur.
    """
    per_case = max(1, max_events // cases)
    events, labels = [], {}
    for c in range(cases):
        mu = np.ones(num_modalities, dtype=bool)
        if num_modalities > 1 and rng.random() < missing:
            mu[rng.integers(num_modalities)] = False
        mods = np.flatnonzero(mu)
        n = int(rng.integers(len(mods), max(len(mods), per_case) + 1))
        assigned = np.concatenate([mods, rng.choice(mods, size=n - len(mods))])
        for m in assigned:
            t = float(rng.integers(0, int(horizon) + 1)) if grid_times else float(np.round(rng.uniform(0, horizon), 3))
            events.append(ClinicalEvent(rng.normal(size=feature_dims[m]), t, int(m), 100 + c))
        labels[100 + c] = (int(rng.integers(2)), bool(rng.random() >= label_missing))
    # unique (case, modality, time) keys, as ingestion guarantees
    uniq = {}
    for e in events:
        uniq[(e.case_id, e.modality, e.timestamp)] = e
    return EventBatch.from_events(uniq.values(), labels, num_modalities, horizon, feature_dims)


def random_cloud(rng: np.random.Generator, n: int = 20, cases: int = 3, num_modalities: int = 2,
                 d: int = 4, observed_rate: float = 0.8, grid_times: bool = True) -> PointCloud:
    times = rng.integers(0, 10, size=n).astype(float) if grid_times else rng.uniform(0, 10, size=n)
    mods = rng.integers(0, num_modalities, size=n)
    case = rng.integers(0, cases, size=n)
    obs = rng.random(n) < observed_rate
    return PointCloud(Tensor(rng.normal(size=(n, d))), times, mods, case, obs, cases, num_modalities)


def tiny_model(feature_dims=(3, 2), d: int = 8, heads: int = 2, rank: int = 2, horizon: float = 48.0,
               fine=(8.0, 16.0), coarse=(16.0, 24.0), seed: int = 0, **kw) -> HierarchyModel:
    cfg = ModelConfig(feature_dims=tuple(feature_dims), d=d, rank=rank, heads=heads, horizon=horizon,
                      fine_intervals=fine, coarse_intervals=coarse, init_seed=seed, **kw)
    return HierarchyModel(cfg)


def brute_neighborhoods(cloud: PointCloud, level: int, delta: float = 2.0, k_max: int = 6) -> list[list[int]]:
    """Pairwise predicate scan written independently of the vectorized builder."""
    out = []
    n = len(cloud)
    for i in range(n):
        members = []
        for j in range(n):
            if j == i:
                members.append(j)
                continue
            if level <= 4 and not cloud.observed[j]:
                continue
            same_c = cloud.case[i] == cloud.case[j]
            same_m = cloud.modality[i] == cloud.modality[j]
            ok = {1: same_c and same_m and abs(cloud.times[i] - cloud.times[j]) <= delta,
                  2: same_c and same_m,
                  3: same_c and not same_m,
                  4: not same_c,
                  5: same_c}[level]
            if ok:
                members.append(j)
        if level == 1:
            others = sorted((abs(cloud.times[i] - cloud.times[j]), j) for j in members if j != i)
            members = sorted([i] + [j for _, j in others[:k_max - 1]])
        out.append(members)
    return out


def brute_auroc(probs, labels) -> float:
    """All positive/negative pairs; a tie counts one half."""
    pos = [p for p, y in zip(probs, labels) if y == 1]
    neg = [p for p, y in zip(probs, labels) if y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else (0.5 if a == b else 0.0)
    return wins / (len(pos) * len(neg))


def brute_auprc(probs, labels) -> float:
    """Average precision by sweeping every distinct threshold from the top."""
    n_pos = sum(1 for y in labels if y == 1)
    ap, prev = 0.0, 0.0
    for thr in sorted(set(probs), reverse=True):
        tp = sum(1 for p, y in zip(probs, labels) if p >= thr and y == 1)
        fp = sum(1 for p, y in zip(probs, labels) if p >= thr and y == 0)
        recall = tp / n_pos
        ap += (recall - prev) * (tp / (tp + fp))
        prev = recall
    return ap
