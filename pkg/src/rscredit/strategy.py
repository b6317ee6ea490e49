"""Optimal feedback strategy on the solver grid and its admissibility checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dpe_solver import LayerData, SolutionGrid, TimeGrid
from .hamiltonian import FOC_TOL, LayerContext, minimize_batch, radius_c2
from .model import FiniteModel, bitstring

MARGIN_FLOOR = 1e-6


class StrategyError(RuntimeError):
    pass


@dataclass
class StrategyGrid:
    """``pi[mask]`` has shape ``(M + 1, n, N)``; ``foc`` and ``margin`` ``(M + 1, n)``.

    Between nodes the strategy is held constant on ``[t_m, t_{m+1})``.
    """

    model: FiniteModel
    grid: TimeGrid
    pi: dict
    foc: dict
    margin: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.model.N

    def node_index(self, t: float) -> int:
        m = int(np.floor(t / self.grid.dt + 1e-12))
        return min(max(m, 0), self.grid.M)

    def at(self, t: float, regime_index: int, mask: int) -> np.ndarray:
        return self.pi[mask][self.node_index(t), regime_index]

    def min_margin(self) -> float:
        return min(float(m.min()) for m in self.margin.values())

    def with_pi(self, pi: dict) -> "StrategyGrid":
        """Same grid with replaced allocations; margins recomputed, FOC set to NaN."""
        margin = {mk: _margin(p, mk, self.N) for mk, p in pi.items()}
        foc = {mk: np.full(p.shape[:2], np.nan) for mk, p in pi.items()}
        return StrategyGrid(self.model, self.grid, pi, foc, margin, {"source": "modified"})


def _margin(pi: np.ndarray, mask: int, N: int) -> np.ndarray:
    alive = [j for j in range(N) if not mask >> j & 1]
    if not alive:
        return np.ones(pi.shape[:2])
    return (1.0 - pi[..., alive]).min(axis=-1)


def node_inner_problems(sol: SolutionGrid, mask: int):
    """Stacked inner-problem data for every (node, regime) of one state."""
    model = sol.model
    d = LayerData.build(model, mask)
    tab = sol.tables[mask]
    K, n = tab.shape
    m = len(d.alive)
    up = np.stack([sol.tables[mask | (1 << j)] for j in d.alive], axis=-1)
    w = (up * d.lam[None]).reshape(-1, m)
    x = np.maximum(tab, sol.floors.get(mask, 0.0)).reshape(-1)
    S = np.broadcast_to(d.S, (K, n, m, m)).reshape(-1, m, m)
    b = np.broadcast_to(d.b, (K, n, m)).reshape(-1, m)
    return d, w, x, S, b, up


def extract_strategy(sol: SolutionGrid, tol: float = FOC_TOL) -> StrategyGrid:
    """Minimizer of the transformed Hamiltonian at every node, embedded into ``R^N``."""
    model, N = sol.model, sol.N
    K, n = sol.grid.M + 1, model.n
    pis, focs, margins = {}, {}, {}
    for mask in sol.tables:
        full = np.zeros((K, n, N))
        if mask == (1 << N) - 1:
            pis[mask], focs[mask], margins[mask] = full, np.zeros((K, n)), np.ones((K, n))
            continue
        d, w, x, S, b, _ = node_inner_problems(sol, mask)
        out = minimize_batch(w, x, S, b, model.theta, tol)
        bad = np.flatnonzero(out.residual > tol)
        if bad.size:
            r = int(bad[0])
            m_idx, a = divmod(r, n)
            raise StrategyError(
                f"inner solver failed at t={sol.grid.nodes[m_idx]:.6g}, i={model.labels[a]}, "
                f"z={bitstring(mask, N)} (residual {out.residual[r]:.3e})"
            )
        full[..., list(d.alive)] = out.pi.reshape(K, n, -1)
        pis[mask] = full
        focs[mask] = out.residual.reshape(K, n)
        margins[mask] = _margin(full, mask, N)
    return StrategyGrid(model, sol.grid, pis, focs, margins, {"tol": tol})


def foc_identity_error(sgrid: StrategyGrid, sol: SolutionGrid) -> float:
    """Max relative error of the first-order identity

        (1 - pi_j)^(-theta/2 - 1)
            = [(mu_j - r) - (1 + theta/2)(sigma sigma^T pi)_j + lambda_j]
              * phi(z) / (lambda_j phi(z^j)),

    obtained by differentiating the transformed Hamiltonian.
    """
    model = sol.model
    th = model.theta
    c = model.coef
    gram = c.gram()
    worst = 0.0
    for mask, pi in sgrid.pi.items():
        alive = [j for j in range(model.N) if not mask >> j & 1]
        if not alive:
            continue
        x = np.maximum(sol.tables[mask], sol.floors.get(mask, 0.0))
        Sp = np.einsum("ajk,mak->maj", gram, pi)
        lam = c.lam[:, mask, :]
        for j in alive:
            lhs = (1.0 - pi[..., j]) ** (-0.5 * th - 1.0)
            bracket = (c.mu[:, j] - c.r)[None] - (1.0 + 0.5 * th) * Sp[..., j] + lam[None, :, j]
            rhs = bracket * x / (lam[None, :, j] * sol.tables[mask | (1 << j)])
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.abs(lhs))))
    return worst


@dataclass
class AdmissibilityReport:
    B_sigma: float
    B_lambda: float
    novikov_bound: float
    min_margin: float
    margin_floor: float
    max_norm: float
    radius_ok: bool
    zero_on_defaulted: bool

    @property
    def admissible(self) -> bool:
        return (np.isfinite(self.novikov_bound) and self.min_margin >= self.margin_floor
                and self.zero_on_defaulted)

    @property
    def flags(self) -> list:
        out = []
        if self.min_margin < self.margin_floor:
            out.append(f"margin {self.min_margin:.3e} below floor {self.margin_floor:.1e}")
        if not np.isfinite(self.novikov_bound):
            out.append("Novikov bound is not finite")
        if not self.zero_on_defaulted:
            out.append("nonzero allocation in a defaulted stock")
        if not self.radius_ok:
            out.append("allocation outside the sanity radius")
        return out

    def as_dict(self) -> dict:
        return {
            "B_sigma": self.B_sigma, "B_lambda": self.B_lambda, "novikov_bound": self.novikov_bound,
            "min_margin": self.min_margin, "margin_floor": self.margin_floor, "max_norm": self.max_norm,
            "radius_ok": self.radius_ok, "zero_on_defaulted": self.zero_on_defaulted,
            "admissible": bool(self.admissible), "flags": self.flags,
        }


def admissibility_report(sgrid: StrategyGrid, sol: Optional[SolutionGrid] = None,
                         margin_floor: float = MARGIN_FLOOR) -> AdmissibilityReport:
    """Deterministic sup-bounds of the Novikov integrand and the distance to 1.

    With ``sol`` given, allocations are also checked against the sanity
    radius built from each state's lower bound.
    """
    model = sgrid.model
    th = model.theta
    c = model.coef
    Bs = Bl = 0.0
    zero_ok, radius_ok = True, True
    max_norm = 0.0
    for mask, pi in sgrid.pi.items():
        alive = np.array([not mask >> j & 1 for j in range(model.N)])
        if np.any(pi[..., ~alive] != 0.0):
            zero_ok = False
        sp = np.einsum("ajd,maj->mad", c.sigma, pi)
        Bs = max(Bs, float((th * th / 8.0) * np.max(np.sum(sp * sp, axis=-1))))
        if alive.any():
            pa = pi[..., alive]
            if np.any(pa >= 1.0):
                Bl = np.inf
            else:
                lam = c.lam[:, mask, :][:, alive]
                Bl = max(Bl, float(np.max(np.sum(((1.0 - pa) ** (-0.5 * th) - 1.0) ** 2 * lam[None], axis=-1))))
        norms = np.linalg.norm(pi, axis=-1)
        max_norm = max(max_norm, float(norms.max()))
        if sol is not None and alive.any() and mask in sol.eps:
            for a, i in enumerate(model.labels):
                ups = [float(sol.tables[mask | (1 << j)].max()) for j in np.flatnonzero(alive)]
                ctx = LayerContext.from_model(model, i, mask, upstream=ups)
                if norms[:, a].max() > radius_c2(ctx, sol.eps[mask]) * (1 + 1e-9):
                    radius_ok = False
    with np.errstate(over="ignore"):
        bound = float(np.exp((Bs + Bl) * sgrid.grid.T))
    return AdmissibilityReport(Bs, Bl, bound, sgrid.min_margin(), margin_floor, max_norm, radius_ok, zero_ok)


def constant_strategy(model: FiniteModel, grid: TimeGrid, pi) -> StrategyGrid:
    """Time- and regime-independent allocation, zeroed on defaulted stocks."""
    pi = np.asarray(pi, dtype=float)
    N, n, K = model.N, model.n, grid.M + 1
    pis = {}
    for mask in range(1 << N):
        alive = np.array([not mask >> j & 1 for j in range(N)])
        pis[mask] = np.broadcast_to(np.where(alive, pi, 0.0), (K, n, N)).copy()
    margin = {mk: _margin(p, mk, N) for mk, p in pis.items()}
    foc = {mk: np.full((K, n), np.nan) for mk in pis}
    return StrategyGrid(model, grid, pis, foc, margin, {"source": "constant"})


def zero_strategy(model: FiniteModel, grid: TimeGrid) -> StrategyGrid:
    return constant_strategy(model, grid, np.zeros(model.N))
