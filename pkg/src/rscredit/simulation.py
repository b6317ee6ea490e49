"""Monte Carlo check of the solver: regime chain, contagious defaults, wealth.

Regime and default events do not depend on the strategy, so a
:class:`PathBundle` of events is simulated once and any number of
strategies is evaluated on it (common random numbers).  Log-wealth uses the
exact exponential representation: with the strategy piecewise constant on
the grid, every time integral is evaluated exactly, and the Brownian
integral is a centred Gaussian with variance ``int |sigma^T pi|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .model import FiniteModel, TruncatedModel, bitstring
from .strategy import StrategyGrid


class SimulationError(RuntimeError):
    pass


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Independent counter-based stream for one path."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, int(path)]))


def _generator_matrix(gen) -> np.ndarray:
    if isinstance(gen, TruncatedModel):
        return np.asarray(gen.a_n)
    if isinstance(gen, FiniteModel):
        return gen.Q
    return np.asarray(gen, dtype=float)


# ---------------------------------------------------------------------------
# event simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimePath:
    """``states[k]`` holds on ``[times[k], times[k+1])``; ``times[-1] == T``."""

    times: np.ndarray
    states: np.ndarray


def simulate_chain(gen, t0: float, y0: int, T: float, rng: np.random.Generator) -> RegimePath:
    """Jump-hold simulation; ``y0`` and the returned states are row indices of the generator."""
    Q = _generator_matrix(gen)
    n = Q.shape[0]
    if not 0 <= y0 < n:
        raise SimulationError(f"initial regime index {y0} outside 0..{n - 1}")
    times, states = [t0], [y0]
    t, i = t0, y0
    while True:
        rate = -Q[i, i]
        if rate <= 0:
            break
        t += rng.exponential() / rate
        if t >= T:
            break
        p = np.maximum(Q[i], 0.0)
        p[i] = 0.0
        cum = np.cumsum(p)
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        i = min(i, n - 1)
        times.append(t)
        states.append(i)
    times.append(T)
    return RegimePath(np.array(times), np.array(states, dtype=int))


@dataclass(frozen=True)
class DefaultEvent:
    time: float
    stock: int          # 0-based
    regime: int         # regime index at the default
    mask_before: int


def simulate_defaults(path: RegimePath, model: FiniteModel, z0: int, rng: np.random.Generator) -> list:
    """Competing exponential clocks with intensities re-read after every event."""
    lam = model.coef.lam
    N = model.N
    events = []
    z = z0
    for k, i in enumerate(path.states):
        t, t_end = path.times[k], path.times[k + 1]
        while True:
            alive = [j for j in range(N) if not z >> j & 1]
            if not alive:
                break
            rates = lam[i, z, alive]
            total = float(rates.sum())
            if total <= 0:
                break
            t = t + rng.exponential() / total
            if t >= t_end:
                break
            cum = np.cumsum(rates)
            pick = min(int(np.searchsorted(cum, rng.random() * total, side="right")), len(alive) - 1)
            j = alive[pick]
            events.append(DefaultEvent(t, j, int(i), z))
            z |= 1 << j
    return events


@dataclass
class PathBundle:
    """Flattened event data of ``n_paths`` simulated paths.

    Segments are maximal intervals with constant (regime, default state).
    """

    seed: int
    t0: float
    T: float
    n_paths: int
    seg_path: np.ndarray
    seg_start: np.ndarray
    seg_end: np.ndarray
    seg_regime: np.ndarray
    seg_mask: np.ndarray
    dft_path: np.ndarray
    dft_time: np.ndarray
    dft_stock: np.ndarray
    dft_regime: np.ndarray
    dft_mask: np.ndarray
    normals: np.ndarray

    def events(self, p: int) -> dict:
        s = self.seg_path == p
        d = self.dft_path == p
        return {
            "segments": list(zip(self.seg_start[s], self.seg_end[s], self.seg_regime[s], self.seg_mask[s])),
            "defaults": list(zip(self.dft_time[d], self.dft_stock[d])),
        }

    def absorbed(self, regime: int = 0) -> np.ndarray:
        """Per path: whether the regime ``regime`` is occupied at ``T``."""
        last = np.zeros(self.n_paths, dtype=int)
        np.maximum.at(last, self.seg_path, np.arange(self.seg_path.size))
        return self.seg_regime[last] == regime


def _segments(path: RegimePath, defaults: list, z0: int):
    cuts = sorted(
        [(t, "r", path.states[k]) for k, t in enumerate(path.times[1:-1], start=1)]
        + [(e.time, "d", e.stock) for e in defaults]
    )
    out = []
    t, i, z = path.times[0], int(path.states[0]), z0
    for tc, kind, val in cuts:
        out.append((t, tc, i, z))
        t = tc
        if kind == "r":
            i = int(val)
        else:
            z |= 1 << int(val)
    out.append((t, path.times[-1], i, z))
    return out


def simulate_paths(model: FiniteModel, t0: float, i0: int, z0: int, n_paths: int, seed: int,
                   T: Optional[float] = None) -> PathBundle:
    """Simulate regime and default events on ``[t0, T]``; ``i0`` is a regime index."""
    T = model.T if T is None else T
    segs, dfts = [], []
    normals = np.empty(n_paths)
    for p in range(n_paths):
        rng = path_rng(seed, p)
        normals[p] = rng.standard_normal()
        chain = simulate_chain(model, t0, i0, T, rng)
        dev = simulate_defaults(chain, model, z0, rng)
        for s in _segments(chain, dev, z0):
            segs.append((p,) + s)
        for e in dev:
            dfts.append((p, e.time, e.stock, e.regime, e.mask_before))
    sa = np.array(segs, dtype=float).reshape(-1, 5)
    da = np.array(dfts, dtype=float).reshape(-1, 5)
    return PathBundle(
        seed, t0, T, n_paths,
        sa[:, 0].astype(int), sa[:, 1], sa[:, 2], sa[:, 3].astype(int), sa[:, 4].astype(int),
        da[:, 0].astype(int), da[:, 1], da[:, 2].astype(int), da[:, 3].astype(int), da[:, 4].astype(int),
        normals,
    )


# ---------------------------------------------------------------------------
# wealth
# ---------------------------------------------------------------------------

def _segment_integrals(bundle: PathBundle, grid, rates: dict) -> np.ndarray:
    """Sum over each path's segments of ``int rate(mask)[., regime]``.

    ``rates[mask]`` is ``(M, n)``: the integrand on ``[t_m, t_{m+1})``.
    """
    nodes = grid.nodes
    out = np.zeros(bundle.n_paths)
    keys = bundle.seg_mask * 4096 + bundle.seg_regime
    for key in np.unique(keys):
        mask, a = divmod(int(key), 4096)
        sel = keys == key
        cum = np.concatenate([[0.0], np.cumsum(rates[mask][:, a] * grid.dt)])
        vals = np.interp(bundle.seg_end[sel], nodes, cum) - np.interp(bundle.seg_start[sel], nodes, cum)
        out += np.bincount(bundle.seg_path[sel], weights=vals, minlength=bundle.n_paths)
    return out


def _node_pi(strategy: StrategyGrid, mask: int) -> np.ndarray:
    return strategy.pi[mask][:-1]


def _check_margin(strategy: StrategyGrid, masks):
    for mask in masks:
        alive = [j for j in range(strategy.N) if not mask >> j & 1]
        if alive and np.any(strategy.pi[mask][..., alive] >= 1.0):
            raise SimulationError(f"strategy reaches pi_j >= 1 in state z={bitstring(mask, strategy.N)}")


def log_wealth_components(bundle: PathBundle, strategy: StrategyGrid, model: FiniteModel):
    """Per path: drift integral, quadratic variation and jump log-terms."""
    c = model.coef
    grid = strategy.grid
    masks = set(np.unique(bundle.seg_mask).tolist())
    _check_margin(strategy, masks)
    drift, qv = {}, {}
    for mask in masks:
        pi = _node_pi(strategy, mask)                       # (M, n, N)
        alive = np.array([not mask >> j & 1 for j in range(model.N)], dtype=float)
        sp = np.einsum("ajd,maj->mad", c.sigma, pi)
        q = np.sum(sp * sp, axis=-1)
        ex = np.einsum("maj,aj->ma", pi, c.mu - c.r[:, None])
        jump_comp = np.einsum("maj,aj->ma", pi, c.lam[:, mask, :] * alive)
        drift[mask] = c.r[None] + ex - 0.5 * q + jump_comp
        qv[mask] = q
    A = _segment_integrals(bundle, grid, drift)
    V = _segment_integrals(bundle, grid, qv)
    J = np.zeros(bundle.n_paths)
    if bundle.dft_path.size:
        m_idx = np.minimum(np.floor(bundle.dft_time / grid.dt + 1e-12).astype(int), grid.M - 1)
        pj = np.array([strategy.pi[mk][m, a, j] for mk, m, a, j in
                       zip(bundle.dft_mask, m_idx, bundle.dft_regime, bundle.dft_stock)])
        J = np.bincount(bundle.dft_path, weights=np.log1p(-pj), minlength=bundle.n_paths)
    return A, V, J


def terminal_log_wealth(bundle: PathBundle, strategy: StrategyGrid, model: FiniteModel, x0: float = 1.0) -> np.ndarray:
    if x0 <= 0:
        raise SimulationError("initial wealth must be positive")
    A, V, J = log_wealth_components(bundle, strategy, model)
    return np.log(x0) + A + np.sqrt(V) * bundle.normals + J


def simulate_wealth(path: RegimePath, defaults: list, strategy: StrategyGrid, model: FiniteModel,
                    x0: float, rng: np.random.Generator, z0: int = 0) -> float:
    """Terminal wealth of one path from its events."""
    segs = _segments(path, defaults, z0)
    b = PathBundle(
        0, float(path.times[0]), float(path.times[-1]), 1,
        np.zeros(len(segs), dtype=int), np.array([s[0] for s in segs]), np.array([s[1] for s in segs]),
        np.array([s[2] for s in segs], dtype=int), np.array([s[3] for s in segs], dtype=int),
        np.zeros(len(defaults), dtype=int), np.array([e.time for e in defaults]),
        np.array([e.stock for e in defaults], dtype=int), np.array([e.regime for e in defaults], dtype=int),
        np.array([e.mask_before for e in defaults], dtype=int), np.array([rng.standard_normal()]),
    )
    return float(np.exp(terminal_log_wealth(b, strategy, model, x0)[0]))


# ---------------------------------------------------------------------------
# objective estimation
# ---------------------------------------------------------------------------

@dataclass
class ObjectiveEstimate:
    J: float
    se: float
    value_form: float
    n_paths: int
    degenerate: bool = False
    log_wealth: Optional[np.ndarray] = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {"estimate": self.J, "se": self.se, "value_form": self.value_form,
                "n_paths": self.n_paths, "degenerate": self.degenerate}


def objective_from_log_wealth(logx: np.ndarray, theta: float, x0: float = 1.0) -> ObjectiveEstimate:
    """``J = -(2/theta) log mean X^(-theta/2)`` with a delta-method standard error."""
    n = logx.size
    y = -0.5 * theta * logx
    lm = logsumexp(y) - np.log(n)
    J = -(2.0 / theta) * lm
    ratio = np.exp(y - lm)              # X^(-theta/2) / mean
    sd = float(np.std(ratio, ddof=1)) if n > 1 else 0.0
    se = (2.0 / theta) * sd / np.sqrt(n)
    degenerate = bool(np.ptp(logx) == 0.0)
    if degenerate:
        se = 0.0
    return ObjectiveEstimate(float(J), float(se), float(J - np.log(x0)), n, degenerate, logx)


def paired_difference(logx_a: np.ndarray, logx_b: np.ndarray, theta: float):
    """``J_a - J_b`` and its delta-method SE on common paths."""
    ea = objective_from_log_wealth(logx_a, theta)
    eb = objective_from_log_wealth(logx_b, theta)
    ya, yb = -0.5 * theta * logx_a, -0.5 * theta * logx_b
    ra = np.exp(ya - (logsumexp(ya) - np.log(ya.size)))
    rb = np.exp(yb - (logsumexp(yb) - np.log(yb.size)))
    se = (2.0 / theta) * float(np.std(ra - rb, ddof=1)) / np.sqrt(ya.size)
    return ea.J - eb.J, se


def estimate_objective(model: FiniteModel, strategy: StrategyGrid, t0: float, i0: int, z0: int, x0: float,
                       n_paths: int, seed: int, bundle: Optional[PathBundle] = None) -> ObjectiveEstimate:
    """Monte Carlo risk-sensitive objective; ``i0`` is a regime label."""
    if n_paths < 100:
        raise SimulationError("need at least 100 paths")
    if bundle is None:
        bundle = simulate_paths(model, t0, model.index_of(i0), z0, n_paths, seed)
    logx = terminal_log_wealth(bundle, strategy, model, x0)
    return objective_from_log_wealth(logx, model.theta, x0)


@dataclass
class ExpansionReport:
    thetas: list
    errors: list
    mean_log: float
    var_log: float
    ratio: float
    J: list

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def small_theta_expansion_check(model: FiniteModel, strategy: StrategyGrid, thetas: Sequence[float],
                                n_paths: int, seed: int, t0: float = 0.0, i0: Optional[int] = None,
                                z0: int = 0, bundle: Optional[PathBundle] = None) -> ExpansionReport:
    """Compare ``J_theta`` with ``E[log X] - theta/4 Var(log X)`` on one path set.

    ``ratio`` is the error at ``thetas[0]`` over the error at ``thetas[1]``.
    """
    thetas = [float(t) for t in thetas]
    if bundle is None:
        i0 = model.labels[0] if i0 is None else i0
        bundle = simulate_paths(model, t0, model.index_of(i0), z0, n_paths, seed)
    logx = terminal_log_wealth(bundle, strategy, model)
    mean = float(np.mean(logx))
    var = float(np.var(logx))
    errs, Js = [], []
    for th in thetas:
        J = objective_from_log_wealth(logx, th).J
        Js.append(J)
        errs.append(abs(J - (mean - 0.25 * th * var)))
    ratio = errs[0] / errs[1] if len(errs) > 1 and errs[1] > 0 else float("nan")
    return ExpansionReport(thetas, errs, mean, var, ratio, Js)


def measure_identity_check(bundle: PathBundle, strategy: StrategyGrid, model: FiniteModel, x0: float = 1.0) -> dict:
    """Pathwise ``X^(-theta/2) = x0^(-theta/2) Gamma(T) exp(theta/2 int L)``.

    ``Gamma`` is the density of the risk-sensitive measure change and ``L``
    the running cost; both are built independently of the wealth formula.
    """
    th = model.theta
    h = 0.5 * th
    c = model.coef
    grid = strategy.grid
    masks = set(np.unique(bundle.seg_mask).tolist())
    gam_drift, cost, qv = {}, {}, {}
    for mask in masks:
        pi = _node_pi(strategy, mask)
        alive = np.array([not mask >> j & 1 for j in range(model.N)], dtype=float)
        lam = c.lam[:, mask, :] * alive
        sp = np.einsum("ajd,maj->mad", c.sigma, pi)
        q = np.sum(sp * sp, axis=-1)
        barrier = (1.0 - pi) ** (-h)
        gam_drift[mask] = -(th * th / 8.0) * q - np.sum(lam[None] * (barrier - 1.0), axis=-1)
        jumps = 2.0 / th + pi - (2.0 / th) * barrier
        cost[mask] = (-c.r[None] - np.einsum("maj,aj->ma", pi, c.mu - c.r[:, None])
                      + 0.5 * (1.0 + h) * q - np.sum(lam[None] * jumps, axis=-1))
        qv[mask] = q
    V = _segment_integrals(bundle, grid, qv)
    log_gamma = -h * np.sqrt(V) * bundle.normals + _segment_integrals(bundle, grid, gam_drift)
    if bundle.dft_path.size:
        m_idx = np.minimum(np.floor(bundle.dft_time / grid.dt + 1e-12).astype(int), grid.M - 1)
        pj = np.array([strategy.pi[mk][m, a, j] for mk, m, a, j in
                       zip(bundle.dft_mask, m_idx, bundle.dft_regime, bundle.dft_stock)])
        log_gamma += np.bincount(bundle.dft_path, weights=-h * np.log1p(-pj), minlength=bundle.n_paths)
    rhs = -h * np.log(x0) + log_gamma + h * _segment_integrals(bundle, grid, cost)
    lhs = -h * terminal_log_wealth(bundle, strategy, model, x0)
    a, b = np.exp(lhs), np.exp(rhs)
    se = float(np.sqrt(np.var(a, ddof=1) / a.size + np.var(b, ddof=1) / b.size))
    return {
        "max_log_gap": float(np.max(np.abs(lhs - rhs))),
        "mean_direct": float(a.mean()),
        "mean_measure": float(b.mean()),
        "se": se,
    }
