"""Operation-count sweep comparing the low-rank logit against the full tensor."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .lrra import BenchRow, benchmark_coupling

DIMS = (2, 3, 4)
NUM_DIMS = (1, 2, 3, 4)
RANKS = (1, 2, 4, 8)


@dataclass
class BenchSummary:
    rows: list[BenchRow]
    r_squared: float                 # coupled flops ~ c * R * d * |D| + c0
    slope: float
    rank_linearity: float            # worst relative residual of per-(d, |D|) fits in R
    growth: dict[tuple[int, int], float]   # (d, R) -> oracle(|D|=4) / oracle(|D|=3) / d

    def passed(self, r2_min: float = 0.98, lin_tol: float = 0.05, growth_tol: float = 0.10) -> bool:
        return (self.r_squared >= r2_min and self.rank_linearity <= lin_tol
                and all(abs(g - 1.0) <= growth_tol for g in self.growth.values()))


def sweep(dims=DIMS, num_dims=NUM_DIMS, ranks=RANKS, pairs: int = 20, seed: int = 0) -> list[BenchRow]:
    return [benchmark_coupling(d, R, n, pairs, seed) for d, n, R in itertools.product(dims, num_dims, ranks)]


def _fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, np.ndarray]:
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    return float(coef[0]), float(coef[1]), pred


def summarize(rows: list[BenchRow]) -> BenchSummary:
    x = np.array([r.rank * r.d * r.num_dims for r in rows], dtype=float)
    y = np.array([r.coupled_flops for r in rows], dtype=float)
    slope, _, pred = _fit(x, y)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    worst = 0.0
    for key in sorted({(r.d, r.num_dims) for r in rows}):
        sub = [r for r in rows if (r.d, r.num_dims) == key]
        if len(sub) < 2:
            continue
        ranks = np.array([r.rank for r in sub], dtype=float)
        flops = np.array([r.coupled_flops for r in sub], dtype=float)
        _, _, fit = _fit(ranks, flops)
        worst = max(worst, float(np.max(np.abs(flops - fit) / flops)))

    by_key = {(r.d, r.rank, r.num_dims): r.oracle_flops for r in rows}
    growth = {(d, R): by_key[(d, R, 4)] / by_key[(d, R, 3)] / d
              for (d, R, n) in by_key if n == 3 and (d, R, 4) in by_key}
    return BenchSummary(rows, r2, slope, worst, growth)


def format_table(summary: BenchSummary) -> str:
    head = f"{'d':>2} {'|D|':>3} {'R':>2} {'coupled':>8} {'oracle':>8} {'t_coupled_us':>12} {'t_oracle_us':>11}"
    lines = [head, "-" * len(head)]
    for r in summary.rows:
        lines.append(f"{r.d:>2} {r.num_dims:>3} {r.rank:>2} {r.coupled_flops:>8} {r.oracle_flops:>8} "
                     f"{r.coupled_seconds * 1e6:>12.2f} {r.oracle_seconds * 1e6:>11.2f}")
    lines.append("")
    lines.append(f"coupled flops vs R*d*|D|: slope {summary.slope:.3f}, R^2 {summary.r_squared:.5f}")
    lines.append(f"worst relative residual of linear-in-R fits: {summary.rank_linearity:.2e}")
    for (d, R), g in sorted(summary.growth.items()):
        lines.append(f"oracle growth |D| 3->4 at d={d}, R={R}: {g * d:.3f} (ratio to d {g:.3f})")
    return "\n".join(lines)
