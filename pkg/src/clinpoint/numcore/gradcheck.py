"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, no_grad, zero_grads


@dataclass
class CoordResult:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    rel_tol: float
    results: list[CoordResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.rel_error <= self.rel_tol for r in self.results)

    def worst(self, k: int = 5) -> list[CoordResult]:
        return sorted(self.results, key=lambda r: -r.rel_error)[:k]

    def by_param(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.param] = max(out.get(r.param, 0.0), r.rel_error)
        return out

    @property
    def failures(self) -> list[CoordResult]:
        return [r for r in self.results if r.rel_error > self.rel_tol]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"grad_check {status}: {len(self.results)} coords, rel_tol={self.rel_tol:g}"]
        for r in self.worst():
            lines.append(f"  {r.param}{list(r.index)}: analytic={r.analytic:.6e} "
                         f"numeric={r.numeric:.6e} rel={r.rel_error:.2e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    model_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    rel_tol: float = 1e-4,
    coords_per_param: int = 16,
    seed: int = 0,
    order: int = 2,
) -> GradCheckReport:
    """Compare tape gradients of ``model_fn()`` with central differences.

    ``model_fn`` must read the parameters' current values and be deterministic.
    Up to ``coords_per_param`` coordinates are sampled from each parameter
    (all of them if it is smaller). ``order=4`` uses the five-point central
    stencil, whose O(h^4) truncation error allows a larger step and so less
    rounding noise; it resolves much smaller gradients than ``order=2``.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    rng = np.random.default_rng(seed)
    zero_grads(params)
    with Tape() as tape:
        loss = model_fn()
        tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    zero_grads(params)

    report = GradCheckReport(rel_tol=rel_tol)
    for p in params:
        flat = p.data.reshape(-1)
        if flat.size <= coords_per_param:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=coords_per_param, replace=False))
        for k in coords:
            orig = flat[k]

            def at(step: float) -> float:
                flat[k] = orig + step
                return model_fn().item()

            with no_grad():
                num = (at(h) - at(-h)) / (2.0 * h)
                if order == 4:
                    num = (8.0 * num * 2.0 * h - (at(2 * h) - at(-2 * h))) / (12.0 * h)
            flat[k] = orig
            ana = float(analytic[p.name].reshape(-1)[k])
            idx = tuple(int(i) for i in np.unravel_index(k, p.shape))
            report.results.append(CoordResult(p.name, idx, ana, num, relative_error(ana, num)))
    return report
