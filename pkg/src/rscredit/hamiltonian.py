"""Risk-sensitive cost, transformed Hamiltonians and the inner allocation problem.

Inside a layer with survivor set ``s`` and regime ``i`` the inner objective is

    g(pi) = sum_j w_j (1 - pi_j)^(-theta/2) + x * H(pi),
    H(pi) = c pi^T S pi - (theta/2) pi^T b,

with ``c = theta/4 (1 + theta/2)``, ``S = sigma_s sigma_s^T``,
``b = mu_s - r + lambda_s`` and ``w_j = upstream_j * lambda_j``.  It is
smooth and strictly convex on ``pi_j < 1``; the minimizer is found by a
batched damped Newton iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import CoefficientTable, DefaultState, FiniteModel, ModelSpec, survivors

GAMMA_MIN = 1e-8
FOC_TOL = 1e-10
MAX_NEWTON = 100
PG_ITERS = 50


class DomainError(ValueError):
    """An allocation left the open set ``pi_j < 1``."""


class MinimizationError(RuntimeError):
    """Inner minimization failed; carries the best iterate found."""

    def __init__(self, message, best_pi=None, residual=None):
        super().__init__(message)
        self.best_pi = best_pi
        self.residual = residual


def quad_coef(theta: float) -> float:
    return 0.25 * theta * (1.0 + 0.5 * theta)


# ---------------------------------------------------------------------------
# coefficient lookup
# ---------------------------------------------------------------------------

def regime_coefficients(model, i: int):
    """``(r, mu, sigma, lam)`` for regime label ``i`` of a model.

    ``lam`` has shape ``(2**N, N)``.
    """
    if isinstance(model, FiniteModel):
        a = model.index_of(i)
        c = model.coef
    elif isinstance(model, ModelSpec):
        if i < 1:
            raise ValueError(f"regime label must be >= 1, got {i}")
        c = model.coefficient_rows(i)
        a = i - 1
    elif isinstance(model, CoefficientTable):
        c, a = model, i
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")
    return float(c.r[a]), c.mu[a], c.sigma[a], c.lam[a]


def _check_domain(pi: np.ndarray):
    if np.any(~np.isfinite(pi)) or np.any(pi >= 1.0):
        raise DomainError(f"allocation must satisfy pi_j < 1, got {pi}")


def _state_mask(z) -> int:
    return z.bits if isinstance(z, DefaultState) else int(z)


# ---------------------------------------------------------------------------
# model-level functions
# ---------------------------------------------------------------------------

def cost_l(pi, i: int, z, model, theta: Optional[float] = None) -> float:
    """Risk-sensitive running cost ``L(pi; i, z)``.

    Defaulted coordinates contribute nothing; their ``pi_j`` is ignored.
    """
    pi = np.asarray(pi, dtype=float)
    theta = model.theta if theta is None else theta
    r, mu, sigma, lam = regime_coefficients(model, i)
    mask = _state_mask(z)
    N = mu.shape[0]
    alive = np.array([not mask >> j & 1 for j in range(N)])
    _check_domain(pi[alive])
    p = np.where(alive, pi, 0.0)
    sp = sigma.T @ p
    jumps = 2.0 / theta + p - (2.0 / theta) * (1.0 - p) ** (-0.5 * theta)
    return float(
        -r - p @ (mu - r) + 0.5 * (1.0 + 0.5 * theta) * (sp @ sp) - np.sum(np.where(alive, jumps * lam[mask], 0.0))
    )


def hamiltonian_tilde_h(pi, i: int, z, f_z: float, f_nb, model, theta: Optional[float] = None) -> float:
    """Transformed Hamiltonian ``H~(pi; i, z, f)``.

    ``f_nb[j]`` is ``f(z^j)`` for 0-based stock ``j``; entries for defaulted
    stocks are never read.
    """
    pi = np.asarray(pi, dtype=float)
    theta = model.theta if theta is None else theta
    r, mu, sigma, lam = regime_coefficients(model, i)
    mask = _state_mask(z)
    N = mu.shape[0]
    alive = np.array([not mask >> j & 1 for j in range(N)])
    if np.any(pi[~alive] != 0.0):
        raise DomainError("allocations in defaulted stocks must be zero")
    _check_domain(pi)
    lz = np.where(alive, lam[mask], 0.0)
    f_nb = np.where(alive, np.asarray(f_nb, dtype=float), 0.0)
    sp = sigma.T @ pi
    h = 0.5 * theta
    inner = -h * r - h * pi @ (mu - r) + quad_coef(theta) * (sp @ sp) + np.sum((-1.0 - h * pi) * lz)
    return float(inner * f_z + np.sum(f_nb * lz * (1.0 - pi) ** (-h)))


# ---------------------------------------------------------------------------
# layer context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerContext:
    """Data of the inner problem for one regime inside a layer.

    ``survivors`` are 0-based stock indices; the vectors ``mu_k``, ``lam_k``,
    ``upstream`` and the Gram matrix follow that order.
    """

    theta: float
    survivors: tuple
    r: float
    mu_k: np.ndarray
    sigma_k: np.ndarray
    lam_k: np.ndarray
    upstream: np.ndarray = field(default=None)
    x: float = 1.0
    k: int = 0

    def __post_init__(self):
        for name in ("mu_k", "sigma_k", "lam_k"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        m = len(self.survivors)
        if self.sigma_k.ndim == 1:
            object.__setattr__(self, "sigma_k", self.sigma_k.reshape(m, -1))
        up = np.ones(m) if self.upstream is None else np.asarray(self.upstream, dtype=float)
        object.__setattr__(self, "upstream", up)

    @classmethod
    def from_model(cls, model, i: int, z, upstream=None, x: float = 1.0) -> "LayerContext":
        r, mu, sigma, lam = regime_coefficients(model, i)
        mask = _state_mask(z)
        N = mu.shape[0]
        s = survivors(mask, N)
        return cls(
            theta=model.theta, survivors=tuple(s), r=r, mu_k=mu[s], sigma_k=sigma[s],
            lam_k=lam[mask, s], upstream=upstream, x=x, k=N - len(s),
        )

    @property
    def gram(self) -> np.ndarray:
        return self.sigma_k @ self.sigma_k.T

    @property
    def b(self) -> np.ndarray:
        return self.mu_k - self.r + self.lam_k

    @property
    def nu(self) -> float:
        """Diagonal shift of the layer generator, ``-(theta/2) r - sum lambda``."""
        return -0.5 * self.theta * self.r - float(np.sum(self.lam_k))


def layer_h_k(pi_k, ctx: LayerContext) -> float:
    pi_k = np.asarray(pi_k, dtype=float)
    _check_domain(pi_k)
    sp = ctx.sigma_k.T @ pi_k
    return float(quad_coef(ctx.theta) * (sp @ sp) - 0.5 * ctx.theta * pi_k @ ctx.b)


def beta_i(ctx: LayerContext) -> float:
    """``-inf H^(k)`` over the survivor allocations (closed form).

    The quadratic's unconstrained minimizer may sit outside ``pi_j < 1``; the
    infimum over the open set is then approached on its boundary, so the
    closed form is an upper bound for it and is used as such.
    """
    if not ctx.survivors:
        return 0.0
    S = ctx.gram
    b = ctx.b
    try:
        L = np.linalg.cholesky(S)
        d = np.abs(np.diag(L))
        if d.min() <= 1e-7 * d.max():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("survivor Gram matrix is singular") from None
    y = np.linalg.solve(L, b)
    return float(0.25 * ctx.theta / (1.0 + 0.5 * ctx.theta) * (y @ y))


def radius_c1(ctx: LayerContext) -> float:
    """Radius beyond which ``H^(k) >= 0``."""
    delta = float(np.linalg.eigvalsh(ctx.gram).min())
    num = np.linalg.norm(ctx.mu_k - ctx.r) + float(np.sum(ctx.lam_k))
    return 2.0 * num / ((1.0 + 0.5 * ctx.theta) * delta)


def radius_c2(ctx: LayerContext, eps: float, c0: Optional[float] = None) -> float:
    """Sanity radius containing the inner minimizer when ``x >= eps``."""
    th = ctx.theta
    delta = float(np.linalg.eigvalsh(ctx.gram).min())
    c0 = float(np.max(ctx.upstream)) if c0 is None else c0
    c1 = radius_c1(ctx)
    return 0.5 * c1 + np.sqrt(0.25 * c1 * c1 + 8.0 * c0 * np.sum(ctx.lam_k) / (eps * th * (2.0 + th) * delta))


# ---------------------------------------------------------------------------
# batched inner solver
# ---------------------------------------------------------------------------

@dataclass
class MinimizeResult:
    pi_star: np.ndarray
    value: float
    foc_residual: float
    iterations: int


@dataclass
class BatchResult:
    pi: np.ndarray          # (R, m)
    value: np.ndarray       # (R,)
    residual: np.ndarray    # (R,)
    iterations: int


def _objective(pi, w, x, S, b, theta):
    h = 0.5 * theta
    Sp = np.einsum("rij,rj->ri", S, pi)
    return np.sum(w * (1.0 - pi) ** (-h), axis=1) + x * (quad_coef(theta) * np.sum(pi * Sp, axis=1) - h * np.sum(pi * b, axis=1))


def _gradient(pi, w, x, S, b, theta):
    h = 0.5 * theta
    Sp = np.einsum("rij,rj->ri", S, pi)
    return w * h * (1.0 - pi) ** (-h - 1.0) + x[:, None] * (2.0 * quad_coef(theta) * Sp - h * b)


def minimize_batch(
    w: np.ndarray,
    x: np.ndarray,
    S: np.ndarray,
    b: np.ndarray,
    theta: float,
    tol: float = FOC_TOL,
    gamma_min: float = GAMMA_MIN,
    max_iter: int = MAX_NEWTON,
    pi0: Optional[np.ndarray] = None,
) -> BatchResult:
    """Minimize ``g`` row-wise for ``R`` independent inner problems.

    Shapes: ``w, b (R, m)``, ``x (R,)``, ``S (R, m, m)``.  All rows need
    ``w >= 0``, ``x > 0`` and ``S`` positive definite.  Converged rows take
    zero steps, so the whole batch advances with one set of array operations.
    """
    w = np.asarray(w, dtype=float)
    R, m = w.shape
    x = np.asarray(x, dtype=float)
    h = 0.5 * theta
    c = quad_coef(theta)
    upper = 1.0 - gamma_min
    xS2 = (2.0 * c) * x[:, None, None] * S
    xhb = (h * x)[:, None] * b
    diag = np.arange(m)

    def fval(p):
        Sp = np.einsum("rij,rj->ri", xS2, p)
        return (w * (1.0 - p) ** (-h)).sum(axis=1) + ((0.5 * Sp - xhb) * p).sum(axis=1)

    def grad(p):
        return w * h * (1.0 - p) ** (-h - 1.0) + np.einsum("rij,rj->ri", xS2, p) - xhb

    pi = np.zeros((R, m)) if pi0 is None else np.minimum(np.array(pi0, dtype=float), upper)
    f = fval(pi)
    g = grad(pi)
    res = np.abs(g).max(axis=1)
    it = 0
    while it < max_iter:
        active = res > tol
        if not active.any():
            break
        it += 1
        om = 1.0 - pi
        H = xS2.copy()
        H[:, diag, diag] += w * (h * (h + 1.0)) * om ** (-h - 2.0)
        p = _newton_directions(H, g)
        p[~active] = 0.0
        # fraction-to-boundary rule keeps pi_j strictly below 1
        with np.errstate(divide="ignore", invalid="ignore"):
            lim = np.where(p > 0, 0.995 * om / p, np.inf)
        alpha = np.minimum(1.0, lim.min(axis=1))
        slope = (g * p).sum(axis=1)
        accepted = ~active
        new_pi, new_f = pi.copy(), f.copy()
        for _ in range(40):
            cand = np.minimum(pi + alpha[:, None] * p, upper)
            fc = fval(cand)
            ok = ~accepted & (fc <= f + 1e-4 * alpha * slope)
            # near the optimum f differences drown in rounding; accept if the gradient shrinks
            flat = ~accepted & ~ok & (fc <= f + 1e-13 * (1.0 + np.abs(f)))
            if flat.any():
                gc = grad(cand)
                ok |= flat & (np.abs(gc).max(axis=1) < res)
            new_pi[ok] = cand[ok]
            new_f[ok] = fc[ok]
            accepted |= ok
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, 0.5 * alpha)
        stalled = np.flatnonzero(~accepted)
        pi, f = new_pi, new_f
        g = grad(pi)
        res = np.abs(g).max(axis=1)
        if stalled.size:
            _projected_gradient(pi, f, g, res, stalled, w, x, S, b, theta, upper)
    return BatchResult(pi, f, res, it)


def _newton_directions(H, g):
    m = g.shape[1]
    if m == 1:
        return -g / H[:, :, 0]
    if m == 2:
        a, b_, c, d = H[:, 0, 0], H[:, 0, 1], H[:, 1, 0], H[:, 1, 1]
        det = a * d - b_ * c
        if np.all(det > 0):
            return -np.stack([d * g[:, 0] - b_ * g[:, 1], a * g[:, 1] - c * g[:, 0]], axis=1) / det[:, None]
    try:
        return -np.linalg.solve(H, g[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return _safe_directions(H, g)


def _safe_directions(H, g):
    out = np.empty_like(g)
    for r in range(g.shape[0]):
        try:
            out[r] = -np.linalg.solve(H[r], g[r])
        except np.linalg.LinAlgError:
            out[r] = -g[r]
    return out


def _projected_gradient(pi, f, g, res, rows, w, x, S, b, theta, upper):
    for r in rows:
        sl = slice(r, r + 1)
        step = 1.0
        for _ in range(PG_ITERS):
            cand = np.minimum(pi[sl] - step * g[sl], upper)
            fc = _objective(cand, w[sl], x[sl], S[sl], b[sl], theta)
            if fc[0] < f[r]:
                pi[r], f[r] = cand[0], fc[0]
                g[r] = _gradient(pi[sl], w[sl], x[sl], S[sl], b[sl], theta)[0]
                step *= 2.0
            else:
                step *= 0.5
        res[r] = np.max(np.abs(g[r]))


def inner_minimize(ctx: LayerContext, tol: float = FOC_TOL, gamma_min: float = GAMMA_MIN,
                   max_iter: int = MAX_NEWTON) -> MinimizeResult:
    """Unique minimizer of the inner objective for one regime."""
    m = len(ctx.survivors)
    if m == 0:
        raise ValueError("no survivors: the all-defaulted layer has no inner problem")
    if np.any(ctx.upstream <= 0) or ctx.x <= 0:
        raise ValueError("upstream values and x must be strictly positive")
    out = minimize_batch(
        (ctx.upstream * ctx.lam_k)[None], np.array([ctx.x]), ctx.gram[None], ctx.b[None],
        ctx.theta, tol, gamma_min, max_iter,
    )
    if out.residual[0] > tol:
        raise MinimizationError(
            f"inner minimization did not converge (residual {out.residual[0]:.3e})",
            best_pi=out.pi[0], residual=float(out.residual[0]),
        )
    return MinimizeResult(out.pi[0], float(out.value[0]), float(out.residual[0]), out.iterations)


def inner_objective(pi, ctx: LayerContext) -> float:
    pi = np.asarray(pi, dtype=float)
    _check_domain(pi)
    return float(np.sum(ctx.upstream * ctx.lam_k * (1.0 - pi) ** (-0.5 * ctx.theta)) + ctx.x * layer_h_k(pi, ctx))


def inner_gradient(pi, ctx: LayerContext) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    return _gradient(pi[None], (ctx.upstream * ctx.lam_k)[None], np.array([ctx.x]), ctx.gram[None],
                     ctx.b[None], ctx.theta)[0]


def g_k(upstream: np.ndarray, x: np.ndarray, ctxs: Sequence[LayerContext], a_floor: float,
        tol: float = FOC_TOL) -> np.ndarray:
    """``G^(k)_i`` for every regime with ``x_i`` clamped below at ``a_floor``.

    ``upstream`` has shape ``(n, m)`` (regime, survivor).
    """
    upstream = np.asarray(upstream, dtype=float)
    xa = np.maximum(np.asarray(x, dtype=float), a_floor)
    lam = np.array([c.lam_k for c in ctxs])
    S = np.array([c.gram for c in ctxs])
    b = np.array([c.b for c in ctxs])
    out = minimize_batch(upstream * lam, xa, S, b, ctxs[0].theta, tol)
    if np.any(out.residual > tol):
        r = int(np.argmax(out.residual))
        raise MinimizationError(f"inner minimization failed for regime row {r}", out.pi[r], float(out.residual[r]))
    return out.value


def inf_tilde_h(f_z: float, ctx: LayerContext, tol: float = FOC_TOL) -> float:
    """``Phi(f) = inf_pi H~``, with ``ctx.upstream`` holding the neighbour values."""
    if not ctx.survivors:
        return -0.5 * ctx.theta * ctx.r * f_z
    c = LayerContext(ctx.theta, ctx.survivors, ctx.r, ctx.mu_k, ctx.sigma_k, ctx.lam_k, ctx.upstream, f_z, ctx.k)
    return ctx.nu * f_z + inner_minimize(c, tol).value
