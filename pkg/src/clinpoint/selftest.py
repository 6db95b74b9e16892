"""Built-in invariant checks with optional fault injection.

Each check compares a production code path against an independent slow
reference. A fault patches one production function so the matching check
must fail, which shows the checks actually bite.
"""

from __future__ import annotations

import contextlib
import itertools
import time
from dataclasses import dataclass
from typing import Callable, Iterator
from unittest import mock

import numpy as np

from . import _kernels, hierarchy, lrra, objectives, selfsup
from .lrra import DIMENSIONS, LowRankCoupling, LrrlLayer, dense_reference
from .nn import ParamStore
from .numcore import Tensor, grad_check, ops
from .pointcloud import PointCloud
from .relations import RelationFeatures


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_cloud(rng: np.random.Generator, n: int, cases: int, M: int = 2, d: int = 4) -> PointCloud:
    times = rng.integers(0, 10, size=n).astype(float) if rng.random() < 0.5 else rng.uniform(0, 10, size=n)
    return PointCloud(Tensor(rng.normal(size=(n, d))), times, rng.integers(0, M, size=n),
                      rng.integers(0, cases, size=n), rng.random(n) < 0.8, cases, M)


def gradient_fixture():
    """Four-case, two-modality batch with half the cases missing a modality,
    a small model and loss weights that give every term a real share.

    Both modalities fire at 0.5 events per hour so level-1 neighborhoods are
    not mostly singletons. The reconstruction target stays live because
    finite differences cannot see a stop-gradient.
    """
    from .hierarchy import HierarchyModel, ModelConfig
    from .synthgen import GenConfig, generate_split
    from .training import TrainingConfig

    cfg = GenConfig(train_cases=4, modality_missing_rate=0.5, label_missing_rate=0.25,
                    feature_dims=(3, 3), event_rates=(0.5, 0.5), seed=3)
    batch, _ = generate_split(cfg, "train")
    model = HierarchyModel(ModelConfig(feature_dims=(3, 3), d=4, rank=2, heads=2,
                                       fine_intervals=(8.0, 16.0), coarse_intervals=(16.0, 24.0)))
    return batch, model, TrainingConfig(lambda_a=0.5, lambda_r=0.5, detach_target=False)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def check_cp_oracle(quick: bool) -> str | None:
    trials = 20 if quick else 200
    rng = np.random.default_rng(0)
    subsets = [s for r in range(1, 5) for s in itertools.combinations(DIMENSIONS, r)]
    for dims in subsets:
        for d in (1, 2, 3, 4):
            for rank in (1, 2, 3):
                cp = LowRankCoupling(ParamStore(rng), "cp", dims, rank, d, 1)
                for k in cp.dims:
                    cp.w[k].data[...] = rng.normal(size=cp.w[k].shape)
                cp.b.data[...] = rng.normal(size=cp.b.shape)
                for _ in range(trials):
                    rel = RelationFeatures(**{f"r_{k}": rng.normal(size=d) for k in dims})
                    ref = lrra.full_tensor_oracle(rel, cp)
                    err = float(np.max(np.abs(lrra.couple(rel, cp) - ref) / (1 + np.abs(ref))))
                    if err > 1e-12:
                        return f"dims={dims} d={d} R={rank}: scaled error {err:.2e}"
    return None


def _brute_neighborhoods(cloud: PointCloud, level: int, delta: float, k_max: int) -> list[list[int]]:
    out = []
    for i in range(len(cloud)):
        members = [i]
        for j in range(len(cloud)):
            if j == i or (level <= 4 and not cloud.observed[j]):
                continue
            same_c = cloud.case[i] == cloud.case[j]
            same_m = cloud.modality[i] == cloud.modality[j]
            ok = {1: same_c and same_m and abs(cloud.times[i] - cloud.times[j]) <= delta,
                  2: same_c and same_m, 3: same_c and not same_m, 4: not same_c, 5: same_c}[level]
            if ok:
                members.append(j)
        if level == 1:
            others = sorted((abs(cloud.times[i] - cloud.times[j]), j) for j in members[1:])
            members = [i] + [j for _, j in others[:k_max - 1]]
        out.append(sorted(members))
    return out


def check_neighborhoods(quick: bool) -> str | None:
    rng = np.random.default_rng(1)
    for trial in range(20 if quick else 100):
        cloud = _random_cloud(rng, int(rng.integers(1, 41)), int(rng.integers(1, 9)))
        for level in range(1, 6):
            got = [x.tolist() for x in hierarchy.build_neighborhoods(cloud, level)]
            if got != _brute_neighborhoods(cloud, level, 2.0, 6):
                return f"level {level} differs from the predicate scan (trial {trial})"
    return None


def check_attention_rows(quick: bool) -> str | None:
    rng = np.random.default_rng(2)
    for level in (1, 2, 3, 5):
        cloud = _random_cloud(rng, 18, 3)
        layer = LrrlLayer(ParamStore(rng), f"l{level}", 4, hierarchy.LEVELS[level].dims, 2, 2, 2)
        edges = hierarchy.level_edges(cloud, level)
        res = layer(cloud, edges, keep_attention=True)
        sums = np.zeros((len(cloud), 2))
        np.add.at(sums, edges.dst, res.alpha.data)
        if np.max(np.abs(sums - 1.0)) > 1e-12:
            return f"level {level}: attention rows do not sum to 1"
        ref = dense_reference(layer, cloud, edges.to_lists())
        if np.max(np.abs(ref - res.out.data)) > 1e-10:
            return f"level {level}: output differs from the dense masked reference"
    return None


def check_gradients(quick: bool) -> str | None:
    from .training import compute_losses

    batch, model, tcfg = gradient_fixture()
    params = model.params if not quick else [p for p in model.params if p.name.startswith(("l3.", "l4."))]
    report = grad_check(lambda: compute_losses(model(batch, "train"), batch, model, tcfg).L_total,
                        params, h=1e-4, order=4, coords_per_param=2 if quick else 3)
    if not report.passed:
        worst = report.worst(1)[0]
        return f"{worst.param}{list(worst.index)}: relative error {worst.rel_error:.2e}"
    return None


def check_recovery(quick: bool) -> str | None:
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(1, 20))
        h, rec = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        mask = rng.random(n) < 0.5
        out = selfsup.recovery_update(h, rec, mask).data
        if out[mask].tobytes() != h[mask].tobytes() or out[~mask].tobytes() != rec[~mask].tobytes():
            return "recovery update did not copy rows exactly"
        if selfsup.recovery_update(out, rec, mask).data.tobytes() != out.tobytes():
            return "recovery update is not idempotent"
    return None


def _brute_auroc(p, y) -> float:
    pos, neg = p[y == 1], p[y == 0]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def check_metrics(quick: bool) -> str | None:
    rng = np.random.default_rng(5)
    for n in range(2, 9 if quick else 13):
        p = np.round(rng.random(n), 1)
        for _ in range(20):
            y = rng.integers(0, 2, size=n)
            if 0 < y.sum() < n and objectives.auroc(p, y) != _brute_auroc(p, y):
                return f"AUROC differs from the pair count at n={n}"
    return None


CHECKS: dict[str, Callable[[bool], str | None]] = {
    "cp_oracle": check_cp_oracle,
    "neighborhoods": check_neighborhoods,
    "attention_rows": check_attention_rows,
    "gradients": check_gradients,
    "recovery": check_recovery,
    "metrics": check_metrics,
}


# ---------------------------------------------------------------------------
# faults
# ---------------------------------------------------------------------------

def _scaled_backward(real):
    def wrapped(*args, **kw):
        gp, gm = real(*args, **kw)
        return [g * 1.05 for g in gp], [None if g is None else g * 1.05 for g in gm]
    return wrapped


def _all_observed(real):
    """Neighborhood builder that forgets which keys are placeholders."""
    def wrapped(cloud, level, delta=2.0):
        seen = PointCloud(cloud.tokens, cloud.times, cloud.modality, cloud.case, np.ones(len(cloud), bool),
                          cloud.num_cases, cloud.num_modalities)
        return real(seen, level, delta)
    return wrapped


def _fault_patches(name: str) -> contextlib.AbstractContextManager:
    real_couple, real_mask = lrra.couple, hierarchy.neighborhood_mask
    real_softmax, real_auroc = ops.segment_softmax, objectives.auroc
    real_where = ops.where
    patches = {
        "coupling": lambda: mock.patch.object(lrra, "couple", lambda rel, cp: real_couple(rel, cp) + 1e-6),
        "gradient": lambda: mock.patch.object(_kernels, "lowrank_backward",
                                              _scaled_backward(_kernels.lowrank_backward)),
        "neighborhood": lambda: mock.patch.object(hierarchy, "neighborhood_mask", _all_observed(real_mask)),
        "softmax": lambda: mock.patch.object(ops, "segment_softmax",
                                             lambda *a, **k: ops.mul(real_softmax(*a, **k), 1.001)),
        "recovery": lambda: mock.patch.object(ops, "where", lambda c, a, b: real_where(~c, a, b)),
        "metric": lambda: mock.patch.object(objectives, "auroc", lambda p, y: 1.0 - real_auroc(p, y)),
    }
    if name not in patches:
        raise KeyError(name)
    return patches[name]()


FAULTS = ("coupling", "gradient", "neighborhood", "softmax", "recovery", "metric")


@contextlib.contextmanager
def inject(fault: str | None) -> Iterator[None]:
    if fault is None:
        yield
        return
    with _fault_patches(fault):
        yield


def run(names=None, fault: str | None = None, quick: bool = False) -> list[CheckResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {', '.join(FAULTS)}")
    results = []
    with inject(fault):
        for name in names or CHECKS:
            t0 = time.perf_counter()
            try:
                problem = CHECKS[name](quick)
            except Exception as exc:  # a crash is a failed invariant too
                problem = f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, problem is None, problem or "ok", time.perf_counter() - t0))
    return results
