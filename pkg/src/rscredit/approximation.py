"""Countable regime spaces through a monotone sequence of finite truncations.

Level ``n`` keeps regimes ``1..n`` and redirects every escaping jump to the
absorbing regime 0.  The solutions decrease in ``n``; convergence is judged
on the regimes of the first level, and the escape probability of the
truncated chain is reported as the a priori error factor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dpe_solver import FOC_TOL, SolutionGrid, TimeGrid, matrix_exponential, solve_finite
from .model import ModelSpec, RegimeGenerator, truncate_generator

DEFAULT_LEVELS = (4, 8, 16, 32)
TOL_SUP = 1e-6
MONOTONE_SLACK = 1e-10
BOUND_LABEL = "escape probability; the error bound holds up to a model constant"


def error_bound(gen: RegimeGenerator, n: int, i: int, s: float, method: str = "expm",
                terms: Optional[int] = None, return_info: bool = False):
    """``1 - sum_{j<=n} a^(n)_ij(s)``: probability that the truncated chain
    started in ``i`` has been absorbed by time ``s``.

    ``method="series"`` sums the exponential series of the ``n``-block up to
    ``terms`` terms and falls back to the matrix exponential when the
    remainder bound exceeds ``1e-12``.
    """
    if not 1 <= i <= n:
        raise ValueError(f"regime {i} outside truncation 1..{n}")
    if s < 0:
        raise ValueError("horizon must be nonnegative")
    B = gen.block(n)
    info = {"method": method}
    if method == "series":
        val, rem, used = _series_rowsum(B, i - 1, s, terms)
        info.update(remainder=rem, terms=used)
        if rem > 1e-12:
            info.update(method="expm", fallback=True)
            val = None
    elif method != "expm":
        raise ValueError(f"unknown method {method!r}")
    if info["method"] == "expm":
        # absorbed mass read off the augmented generator avoids 1 - rowsum cancellation
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = B
        aug[:n, n] = -B.sum(axis=1)
        out = float(matrix_exponential(aug * s)[i - 1, n])
    else:
        out = 1.0 - val
    out = min(1.0, max(0.0, out))
    return (out, info) if return_info else out


def _series_rowsum(B: np.ndarray, row: int, s: float, terms: Optional[int]):
    """Row sum of ``exp(B s)`` by Taylor series with a rigorous remainder bound."""
    q = float(np.abs(B).sum(axis=1).max()) * s
    if terms is None:
        terms = 10
        while _remainder(q, terms) > 1e-17 and terms < 400:
            terms += 5
    v = np.ones(B.shape[0])
    total = v[row]
    term = v
    for k in range(1, terms):
        term = (s / k) * (B @ term)
        total += term[row]
    return float(total), _remainder(q, terms), terms


def _remainder(q: float, K: int) -> float:
    # sum_{k >= K} q^k / k! <= q^K / K! * e^q
    if q == 0:
        return 0.0
    return math.exp(K * math.log(q) - math.lgamma(K + 1) + q)


def geometric_bound(n: int, s: float) -> float:
    """Closed-form escape probability of the geometric family."""
    return -math.expm1(-s / 2.0 ** (n - 1))


def solve_level(spec: ModelSpec, n: int, grid: TimeGrid, tol: float = FOC_TOL) -> SolutionGrid:
    """Solve the level-``n`` truncation (regime 0 absorbing, at column 0)."""
    trunc = truncate_generator(spec.generator, n, spec)
    sol = solve_finite(trunc, grid, tol)
    sol.diagnostics["level"] = n
    return sol


@dataclass
class ApproximationRun:
    levels: list
    solutions: list
    deltas: list = field(default_factory=list)
    monotone_violations: list = field(default_factory=list)
    converged: bool = False
    bounds: dict = field(default_factory=dict)
    wall_time: dict = field(default_factory=dict)
    window: int = 0

    @property
    def limit(self) -> SolutionGrid:
        return self.solutions[-1]

    @property
    def monotone(self) -> bool:
        return not self.monotone_violations

    def report(self) -> dict:
        return {
            "levels": self.levels,
            "reporting_window": list(range(1, self.window + 1)),
            "sup_deltas": self.deltas,
            "monotone": self.monotone,
            "monotone_violations": self.monotone_violations,
            "converged": self.converged,
            "final_delta": self.deltas[-1] if self.deltas else None,
            "error_bound": {str(k): v for k, v in self.bounds.items()},
            "error_bound_label": BOUND_LABEL,
            "wall_time_s": {str(k): v for k, v in self.wall_time.items()},
        }


def window_values(sol: SolutionGrid, window: int) -> dict:
    """Tables restricted to regimes ``1..window`` (columns 1..window)."""
    return {mask: tab[:, 1:window + 1] for mask, tab in sol.tables.items()}


def run_sequence(spec: ModelSpec, levels: Sequence[int] = DEFAULT_LEVELS, grid: Optional[TimeGrid] = None,
                 tol_sup: float = TOL_SUP, tol: float = FOC_TOL, run_all: bool = False) -> ApproximationRun:
    """Solve increasing levels until the sup-delta on the window is ``<= tol_sup``.

    With ``run_all`` every level is solved even after convergence.
    """
    levels = [int(n) for n in levels]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"level schedule must be strictly increasing, got {levels}")
    grid = grid or TimeGrid(spec.T)
    window = levels[0]
    run = ApproximationRun([], [], window=window)
    prev = None
    for n in levels:
        t0 = time.perf_counter()
        sol = solve_level(spec, n, grid, tol)
        run.wall_time[n] = time.perf_counter() - t0
        run.levels.append(n)
        run.solutions.append(sol)
        run.bounds[n] = max(error_bound(spec.generator, n, i, grid.T) for i in range(1, window + 1))
        cur = window_values(sol, window)
        if prev is not None:
            diff = max(float(np.max(prev[m] - cur[m])) for m in cur)
            rise = max(float(np.max(cur[m] - prev[m])) for m in cur)
            run.deltas.append(max(diff, rise))
            if rise > MONOTONE_SLACK:
                run.monotone_violations.append({"from": run.levels[-2], "to": n, "max_increase": rise})
            if run.deltas[-1] <= tol_sup:
                run.converged = True
                if not run_all:
                    break
        prev = cur
    return run
