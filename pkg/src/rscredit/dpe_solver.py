"""Layer-by-layer solver for the Cole-Hopf transformed DPE system.

For a default state ``z`` with ``k`` defaults the transformed value
``phi(., ., z)`` solves, backward from ``phi(T) = 1``,

    dphi/dt = -A^(k) phi - G^(k)(t, phi),   A^(k) = Q + diag(nu),

where ``G^(k)`` couples to the layer ``k + 1`` tables of the neighbour
states.  The all-defaulted layer is linear and solved by matrix exponential.
Every layer with the same cardinality is integrated in one batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .hamiltonian import FOC_TOL, MinimizationError, beta_i, minimize_batch
from .model import FiniteModel, TruncatedModel, bitstring, states_by_cardinality, survivors

log = logging.getLogger(__name__)

FLOOR_SLACK = 1e-9
DEFAULT_STEPS = 400


class SolverError(RuntimeError):
    """A layer could not be solved; ``layer`` names the default state."""

    def __init__(self, message, layer: Optional[str] = None, diagnostics: Optional[dict] = None):
        super().__init__(message if layer is None else f"layer z={layer}: {message}")
        self.reason = message
        self.layer = layer
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int = DEFAULT_STEPS

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"grid needs M >= 2 steps, got {self.M}")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.M * factor)


# ---------------------------------------------------------------------------
# matrix exponential
# ---------------------------------------------------------------------------

_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
    129060195264000.0, 10559470521600.0, 670442572800.0, 33522128640.0,
    1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0,
])
_PADE13 = _PADE13 / _PADE13[0]   # exact identity for A = 0


def matrix_exponential(A: np.ndarray) -> np.ndarray:
    """``exp(A)`` by scaling and squaring with a degree-13 Pade kernel.

    The scaling makes ``||A / 2**s||_1 <= 0.5``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix exponential needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise OverflowError("matrix has non-finite entries")
    n = A.shape[0]
    norm = np.abs(A).sum(axis=0).max() if n else 0.0
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    As = A / 2.0 ** s
    I = np.eye(n)
    A2 = As @ As
    A4 = A2 @ A2
    A6 = A4 @ A2
    b = _PADE13
    U = As @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * I)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * I
    E = np.linalg.solve(V - U, V + U)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(s):
            E = E @ E
    if not np.all(np.isfinite(E)):
        raise OverflowError(f"matrix exponential overflowed (||A||_1 = {norm:.3g})")
    return E


def matrix_exponential_apply(A: np.ndarray, s: float, v: np.ndarray) -> np.ndarray:
    if s < 0:
        raise ValueError(f"time argument must be nonnegative, got {s}")
    return matrix_exponential(np.asarray(A, dtype=float) * s) @ np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# generic integration
# ---------------------------------------------------------------------------

def rk4_step(f: Callable, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_forward(f: Callable, y0, grid: TimeGrid) -> np.ndarray:
    """Fixed-step RK4 for ``y' = f(t, y)`` on ``grid``; returns ``(M+1, ...)`` nodes."""
    y = np.array(y0, dtype=float)
    out = np.empty((grid.M + 1,) + y.shape)
    out[0] = y
    h = grid.dt
    for m in range(grid.M):
        y = rk4_step(f, m * h, y, h)
        out[m + 1] = y
    return out


# ---------------------------------------------------------------------------
# solution container
# ---------------------------------------------------------------------------

@dataclass
class SolutionGrid:
    """``phi(t_m, i, z)`` tables; ``tables[mask]`` has shape ``(M + 1, n)``.

    Rows follow the ascending time nodes, columns the model's regimes.
    """

    model: FiniteModel
    grid: TimeGrid
    tables: dict
    eps: dict = field(default_factory=dict)
    floors: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.model.N

    @property
    def theta(self) -> float:
        return self.model.theta

    def phi(self, m: int, i: int, z) -> float:
        """Value at node ``m``, regime label ``i`` and state mask (or bitstring) ``z``."""
        mask = z if isinstance(z, int) else int(sum(1 << j for j, c in enumerate(str(z)) if c == "1"))
        return float(self.tables[mask][m, self.model.index_of(i)])

    def min_value(self) -> float:
        return min(float(t.min()) for t in self.tables.values())


def value_function(sol: SolutionGrid, x0: float = 1.0):
    """``Vbar = -(2/theta) log phi`` per state, and ``log x0 + Vbar(0, ., .)``."""
    if x0 <= 0:
        raise ValueError("initial wealth must be positive")
    vbar = {}
    for mask, tab in sol.tables.items():
        if np.any(tab <= 0):
            raise ValueError(f"non-positive phi in layer {bitstring(mask, sol.N)}")
        v = -(2.0 / sol.theta) * np.log(tab)
        v[-1] = 0.0
        vbar[mask] = v
    v0 = {mask: np.log(x0) + v[0] for mask, v in vbar.items()}
    return vbar, v0


# ---------------------------------------------------------------------------
# layer data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerData:
    """Per-regime coefficients of one default state, survivors in index order."""

    mask: int
    alive: tuple
    nu: np.ndarray      # (n,)
    lam: np.ndarray     # (n, m)
    S: np.ndarray       # (n, m, m)
    b: np.ndarray       # (n, m)
    rate: np.ndarray    # (n,), (theta/2) r + sum lambda

    @classmethod
    def build(cls, model: FiniteModel, mask: int) -> "LayerData":
        c = model.coef
        alive = tuple(survivors(mask, model.N))
        idx = list(alive)
        lam = c.lam[:, mask, :][:, idx]
        gram = c.gram()[:, idx][:, :, idx]
        b = c.mu[:, idx] - c.r[:, None] + lam
        rate = 0.5 * model.theta * c.r + lam.sum(axis=1)
        return cls(mask, alive, -rate, lam, gram, b, rate)

    def generator(self, Q: np.ndarray) -> np.ndarray:
        return Q + np.diag(self.nu)

    def betas(self, model: FiniteModel) -> np.ndarray:
        if not self.alive:
            return np.zeros(model.n)
        from .hamiltonian import LayerContext

        out = np.empty(model.n)
        for a in range(model.n):
            ctx = LayerContext(model.theta, self.alive, 0.0, self.b[a], model.coef.sigma[a][list(self.alive)],
                               np.zeros(len(self.alive)))
            out[a] = beta_i(ctx)
        return out


def _as_finite(model) -> FiniteModel:
    if isinstance(model, TruncatedModel):
        return model.as_finite()
    if isinstance(model, FiniteModel):
        return model
    if hasattr(model, "finite_model"):
        return model.finite_model()
    raise TypeError(f"cannot solve model of type {type(model).__name__}")


# ---------------------------------------------------------------------------
# terminal layer and lower bounds
# ---------------------------------------------------------------------------

def solve_terminal_layer(model, grid: TimeGrid) -> np.ndarray:
    """All-defaulted layer: ``phi(t) = exp((Q - theta/2 diag r)(T - t)) 1``."""
    model = _as_finite(model)
    A = model.Q - 0.5 * model.theta * np.diag(model.coef.r)
    ones = np.ones(model.n)
    nodes = grid.nodes
    out = np.empty((grid.M + 1, model.n))
    for m, t in enumerate(nodes):
        out[m] = matrix_exponential_apply(A, grid.T - t, ones)
    out[-1] = 1.0
    if np.any(out <= 0):
        raise SolverError("terminal layer lost positivity", layer=bitstring((1 << model.N) - 1, model.N))
    return out


def psi_system(model: FiniteModel, data: LayerData, betas: Optional[np.ndarray] = None) -> Callable:
    beta = data.betas(model) if betas is None else betas
    Q = model.Q
    rate = data.rate

    def f(t, x):
        return Q @ x - rate * x - beta * np.maximum(np.abs(x), 1.0)

    return f


def lower_bound_epsilon(model, mask: int, grid: TimeGrid, confirm: bool = True, return_path: bool = False):
    """``eps = min_i inf_t psi_i`` for the lower-bound system of state ``mask``.

    With ``confirm`` the system is also integrated on a 2x finer grid and the
    smaller value kept.
    """
    model = _as_finite(model)
    data = LayerData.build(model, mask)
    f = psi_system(model, data)
    psi = integrate_forward(f, np.ones(model.n), grid)
    eps = float(psi.min())
    if confirm:
        eps = min(eps, float(integrate_forward(f, np.ones(model.n), grid.refined()).min()))
    if not eps > 0:
        raise SolverError(f"lower bound eps={eps:.3e} is not positive; refine the grid or check the model",
                          layer=bitstring(mask, model.N))
    return (eps, psi) if return_path else eps


# ---------------------------------------------------------------------------
# layer integration
# ---------------------------------------------------------------------------

def _upstream_arrays(model: FiniteModel, datas: list, tables: dict, grid: TimeGrid):
    """Neighbour values at nodes and midpoints, shaped ``(M+1 | M, rows, m)``."""
    nodes = grid.nodes
    mids = nodes[:-1] + 0.5 * grid.dt
    node_vals, mid_vals = [], []
    for d in datas:
        cols_n, cols_m = [], []
        for j in d.alive:
            tab = tables[d.mask | (1 << j)]
            spline = CubicSpline(nodes, tab, axis=0)
            cols_n.append(tab)
            cols_m.append(spline(mids))
        node_vals.append(np.stack(cols_n, axis=-1))
        mid_vals.append(np.stack(cols_m, axis=-1))
    # rows ordered (state, regime)
    node_vals = np.concatenate(node_vals, axis=1)
    mid_vals = np.concatenate(mid_vals, axis=1)
    return node_vals, mid_vals


class _LayerBatch:
    """Right-hand side of the stacked layer ODEs in reversed time."""

    def __init__(self, model: FiniteModel, datas: list, floors: np.ndarray, tol: float):
        self.model = model
        self.datas = datas
        self.n = model.n
        self.theta = model.theta
        self.lam = np.concatenate([d.lam for d in datas])
        self.S = np.concatenate([d.S for d in datas])
        self.b = np.concatenate([d.b for d in datas])
        self.A = np.stack([d.generator(model.Q) for d in datas])   # (states, n, n)
        self.floor = np.repeat(floors, self.n)
        self.tol = tol
        self.pi_prev = None
        self.calls = 0
        self.max_iter = 0
        self.stage_dips = 0

    def g(self, y_flat: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        self.stage_dips += int(np.count_nonzero(y_flat < self.floor))
        x = np.maximum(y_flat, self.floor)
        out = minimize_batch(upstream * self.lam, x, self.S, self.b, self.theta, self.tol, pi0=self.pi_prev)
        if np.any(out.residual > self.tol):
            r = int(np.argmax(out.residual))
            raise MinimizationError(
                f"inner minimization failed at row {r} (residual {out.residual[r]:.3e})",
                best_pi=out.pi[r], residual=float(out.residual[r]),
            )
        self.pi_prev = out.pi
        self.calls += 1
        self.max_iter = max(self.max_iter, out.iterations)
        return out.value, out.pi

    def rhs(self, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        lin = np.einsum("sij,sj->si", self.A, y)
        gv, _ = self.g(y.reshape(-1), upstream)
        return lin + gv.reshape(y.shape)


def solve_cardinality_layer(model: FiniteModel, masks: list, tables: dict, grid: TimeGrid,
                            floors: np.ndarray, tol: float = FOC_TOL) -> np.ndarray:
    """Integrate every state in ``masks`` (same cardinality) together.

    Returns an array ``(states, M+1, n)`` in ascending time.
    """
    datas = [LayerData.build(model, mk) for mk in masks]
    up_node, up_mid = _upstream_arrays(model, datas, tables, grid)
    batch = _LayerBatch(model, datas, np.asarray(floors, dtype=float), tol)
    M, h = grid.M, grid.dt
    y = np.ones((len(masks), model.n))
    out = np.empty((len(masks), M + 1, model.n))
    out[:, M] = y
    # reversed time: tau = T - t, node index M - step
    for step in range(M):
        m_hi = M - step
        u0 = up_node[m_hi]
        um = up_mid[m_hi - 1]
        u1 = up_node[m_hi - 1]
        k1 = batch.rhs(y, u0)
        k2 = batch.rhs(y + 0.5 * h * k1, um)
        k3 = batch.rhs(y + 0.5 * h * k2, um)
        k4 = batch.rhs(y + h * k3, u1)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[:, m_hi - 1] = y
    stats = {"inner_calls": batch.calls, "max_newton_iterations": batch.max_iter, "floor_stage_dips": batch.stage_dips}
    if batch.stage_dips:
        log.info("%d integrator stages fell below the truncation floor", batch.stage_dips)
    return out, stats


def solve_layer(model, mask: int, tables: dict, grid: TimeGrid, a_floor: float, tol: float = FOC_TOL) -> np.ndarray:
    """Single-state version of :func:`solve_cardinality_layer`."""
    model = _as_finite(model)
    if mask == (1 << model.N) - 1:
        return solve_terminal_layer(model, grid)
    out, _ = solve_cardinality_layer(model, [mask], tables, grid, np.array([a_floor]), tol)
    return out[0]


def solve_finite(model, grid: TimeGrid, tol: float = FOC_TOL, confirm_eps: bool = True) -> SolutionGrid:
    """Full backward recursion over default cardinalities ``k = N, ..., 0``."""
    model = _as_finite(model)
    N = model.N
    tables, eps, floors = {}, {}, {}
    diag = {"layers": {}}
    for layer in states_by_cardinality(N):
        masks = [z.bits for z in layer]
        k = layer[0].cardinality
        if k == N:
            (mask,) = masks
            tab = solve_terminal_layer(model, grid)
            tables[mask] = tab
            eps[mask] = float(tab.min())
            floors[mask] = min(1.0, eps[mask]) / 2.0
            continue
        layer_eps = []
        for mk in masks:
            try:
                layer_eps.append(lower_bound_epsilon(model, mk, grid, confirm=confirm_eps))
            except SolverError as exc:
                raise SolverError(exc.reason, layer=exc.layer, diagnostics={"k": k}) from exc
        fl = np.array([min(1.0, e) / 2.0 for e in layer_eps])
        try:
            out, stats = solve_cardinality_layer(model, masks, tables, grid, fl, tol)
        except MinimizationError as exc:
            raise SolverError(f"cardinality {k}: {exc}", diagnostics={"k": k, "residual": exc.residual}) from exc
        for s, mk in enumerate(masks):
            z = bitstring(mk, N)
            tab = out[s]
            low = float(tab.min())
            if not np.all(np.isfinite(tab)):
                raise SolverError("non-finite values", layer=z)
            if low < layer_eps[s] - FLOOR_SLACK:
                raise SolverError(f"solution {low:.6g} fell below lower bound {layer_eps[s]:.6g}", layer=z,
                                  diagnostics={"min": low, "eps": layer_eps[s]})
            tables[mk] = tab
            eps[mk] = layer_eps[s]
            floors[mk] = float(fl[s])
            diag["layers"][z] = {"k": k, "min_phi": low, **stats}
    return SolutionGrid(model, grid, tables, eps, floors, diag)


# ---------------------------------------------------------------------------
# residual check
# ---------------------------------------------------------------------------

def dpe_residual(sol: SolutionGrid, tol: float = FOC_TOL) -> float:
    """Max-norm of ``dphi/dt + A phi + G(phi)`` at interior nodes.

    The time derivative uses the five-point centred difference, so the
    check measures the integrator error rather than the stencil error.
    """
    model, grid = sol.model, sol.grid
    if grid.M < 5:
        raise ValueError("residual check needs at least 5 steps")
    h = grid.dt
    worst = 0.0
    for mask, tab in sol.tables.items():
        d = LayerData.build(model, mask)
        dphi = (-tab[4:] + 8.0 * tab[3:-1] - 8.0 * tab[1:-3] + tab[:-4]) / (12.0 * h)
        inner = tab[2:-2]
        lin = inner @ d.generator(model.Q).T
        if d.alive:
            up = np.stack([sol.tables[mask | (1 << j)][2:-2] for j in d.alive], axis=-1)
            K, n, m = up.shape
            x = np.maximum(inner, sol.floors.get(mask, 0.0)).reshape(-1)
            out = minimize_batch(
                (up * d.lam[None]).reshape(-1, m), x,
                np.broadcast_to(d.S, (K, n, m, m)).reshape(-1, m, m),
                np.broadcast_to(d.b, (K, n, m)).reshape(-1, m), model.theta, tol,
            )
            lin = lin + out.value.reshape(K, n)
        worst = max(worst, float(np.abs(dphi + lin).max()))
    return worst
