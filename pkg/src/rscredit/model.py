"""Market model data: regime generators, coefficient tables, default states.

Regimes are labelled ``1, 2, ...`` externally and stored 0-based internally.
A truncated model adjoins the absorbing regime ``0`` at internal index 0, so
for truncated models the internal index and the label coincide.

Default states are integer bitmasks: stock ``j`` (1-based) defaulted iff bit
``j - 1`` is set.  The printed bitstring puts stock 1 leftmost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

import numpy as np

ROW_SUM_TOL = 1e-12
PD_FLOOR = 1e-10
TAIL_TOL = 1e-10
MAX_STOCKS = 20


class ModelError(ValueError):
    """Raised when model data cannot be used to build a solver input."""


# ---------------------------------------------------------------------------
# default states
# ---------------------------------------------------------------------------

def bitstring(mask: int, N: int) -> str:
    return "".join("1" if mask >> j & 1 else "0" for j in range(N))


def parse_bitstring(s: str, N: Optional[int] = None) -> int:
    if N is not None and len(s) != N:
        raise ModelError(f"default-state bitstring {s!r} must have length {N}")
    if not s or set(s) - {"0", "1"}:
        raise ModelError(f"invalid default-state bitstring {s!r}")
    return sum(1 << j for j, c in enumerate(s) if c == "1")


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def survivors(mask: int, N: int) -> list[int]:
    """0-based indices of stocks still alive in ``mask``."""
    return [j for j in range(N) if not mask >> j & 1]


@dataclass(frozen=True)
class DefaultState:
    bits: int
    N: int

    def __post_init__(self):
        if not 1 <= self.N <= MAX_STOCKS:
            raise ModelError(f"N must lie in 1..{MAX_STOCKS}, got {self.N}")
        if not 0 <= self.bits < 1 << self.N:
            raise ModelError(f"bitmask {self.bits} out of range for N={self.N}")

    @classmethod
    def from_string(cls, s: str) -> "DefaultState":
        return cls(parse_bitstring(s), len(s))

    @property
    def cardinality(self) -> int:
        return popcount(self.bits)

    def defaulted(self, j: int) -> bool:
        """Whether stock ``j`` (1-based) has defaulted."""
        self._check_index(j)
        return bool(self.bits >> (j - 1) & 1)

    def neighbor(self, j: int) -> "DefaultState":
        self._check_index(j)
        return DefaultState(self.bits ^ (1 << (j - 1)), self.N)

    def survivors(self) -> list[int]:
        return [j + 1 for j in survivors(self.bits, self.N)]

    def _check_index(self, j: int) -> None:
        if not 1 <= j <= self.N:
            raise IndexError(f"stock index {j} out of range 1..{self.N}")

    def __str__(self) -> str:
        return bitstring(self.bits, self.N)


def neighbor(z: DefaultState, j: int) -> DefaultState:
    return z.neighbor(j)


def states_by_cardinality(N: int) -> list[list[DefaultState]]:
    """Default states grouped by number of defaults, from ``k = N`` down to 0.

    Inside a layer, states are ordered by the sorted tuple of defaulted
    stocks, so the output is deterministic.
    """
    if not 1 <= N <= MAX_STOCKS:
        raise ModelError(f"N must lie in 1..{MAX_STOCKS}, got {N}")
    layers = []
    for k in range(N, -1, -1):
        layer = [DefaultState(sum(1 << j for j in c), N) for c in combinations(range(N), k)]
        layers.append(layer)
    return layers


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegimeGenerator:
    """Q-matrix of the regime chain, either a finite table or a countable family.

    For the countable form ``rate(i, j)`` gives ``q_ij`` for labels ``i, j >= 1``
    and ``tail(i, n)`` gives ``sum_{l > n} q_il``.
    """

    matrix: Optional[np.ndarray] = None
    rate: Optional[Callable[[int, int], float]] = None
    tail: Optional[Callable[[int, int], float]] = None
    name: str = "custom"

    def __post_init__(self):
        if (self.matrix is None) == (self.rate is None):
            raise ModelError("give exactly one of a finite matrix or a countable rate function")
        if self.matrix is not None:
            Q = np.array(self.matrix, dtype=float)
            if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
                raise ModelError(f"generator matrix must be square, got shape {Q.shape}")
            Q.setflags(write=False)
            object.__setattr__(self, "matrix", Q)
        elif self.tail is None:
            raise ModelError("countable generator needs a tail(i, n) function")

    @classmethod
    def finite(cls, Q) -> "RegimeGenerator":
        return cls(matrix=np.asarray(Q, dtype=float), name="finite")

    @property
    def mode(self) -> str:
        return "finite" if self.matrix is not None else "countable"

    @property
    def size(self) -> Optional[int]:
        return None if self.matrix is None else self.matrix.shape[0]

    def q(self, i: int, j: int) -> float:
        if self.matrix is not None:
            n = self.matrix.shape[0]
            if i > n or j > n:
                return 0.0
            return float(self.matrix[i - 1, j - 1])
        return float(self.rate(i, j))

    def row_tail(self, i: int, n: int) -> float:
        if self.matrix is not None:
            return float(self.matrix[i - 1, n:].sum()) if n < self.matrix.shape[0] else 0.0
        return float(self.tail(i, n))

    def block(self, n: int) -> np.ndarray:
        """The ``n x n`` block ``(q_ij)_{1 <= i, j <= n}``."""
        if self.matrix is not None:
            size = self.matrix.shape[0]
            if n > size:
                out = np.zeros((n, n))
                out[:size, :size] = self.matrix
                return out
            return np.array(self.matrix[:n, :n])
        return np.array([[self.rate(i, j) for j in range(1, n + 1)] for i in range(1, n + 1)], dtype=float)

    def as_countable(self) -> "RegimeGenerator":
        """Embed a finite generator as a countable one with zero rates beyond its size."""
        if self.matrix is None:
            return self
        Q = self.matrix
        size = Q.shape[0]

        def rate(i, j):
            return float(Q[i - 1, j - 1]) if i <= size and j <= size else 0.0

        def tail(i, n):
            return float(Q[i - 1, n:].sum()) if i <= size and n < size else 0.0

        return RegimeGenerator(rate=rate, tail=tail, name="embedded")


def geometric_generator() -> RegimeGenerator:
    """Countable generator with ``q_ii = -1`` and off-diagonal rates ``1/2, 1/4, ...``.

    Row ``i`` assigns ``2**-j`` to column ``j < i`` and ``2**-(j-1)`` to
    column ``j > i``, so every row of the ``n``-block sums to ``-2**-(n-1)``.
    """

    def rate(i, j):
        if i == j:
            return -1.0
        return 2.0 ** -j if j < i else 2.0 ** -(j - 1)

    def tail(i, n):
        if i > n:
            # row i sums to zero, so the tail (diagonal included) offsets columns 1..n
            return -(1.0 - 2.0 ** -n)
        return 2.0 ** -(n - 1)

    return RegimeGenerator(rate=rate, tail=tail, name="geometric")


# ---------------------------------------------------------------------------
# coefficients and model spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientTable:
    """Dense per-regime coefficients for a finite regime set.

    Shapes: ``r (n,)``, ``mu (n, N)``, ``sigma (n, N, d)``, ``lam (n, 2**N, N)``.
    """

    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for name in ("r", "mu", "sigma", "lam"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        n = self.r.shape[0]
        N = self.mu.shape[1] if self.mu.ndim == 2 else -1
        if self.mu.shape != (n, N) or self.sigma.ndim != 3 or self.sigma.shape[:2] != (n, N):
            raise ModelError("inconsistent coefficient shapes for r, mu, sigma")
        if self.lam.shape != (n, 1 << N, N):
            raise ModelError(f"lambda table must have shape {(n, 1 << N, N)}, got {self.lam.shape}")

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def N(self) -> int:
        return self.mu.shape[1]

    @property
    def d(self) -> int:
        return self.sigma.shape[2]

    def gram(self) -> np.ndarray:
        """``sigma sigma^T`` per regime, shape ``(n, N, N)``."""
        return np.einsum("ijk,ilk->ijl", self.sigma, self.sigma)

    def take(self, n: int) -> "CoefficientTable":
        return CoefficientTable(self.r[:n], self.mu[:n], self.sigma[:n], self.lam[:n])


@dataclass(frozen=True)
class FiniteModel:
    """Solver input: finite regime set with generator ``Q`` and dense coefficients."""

    theta: float
    T: float
    Q: np.ndarray
    coef: CoefficientTable
    labels: tuple = ()

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        if Q.shape != (self.coef.n, self.coef.n):
            raise ModelError(f"generator shape {Q.shape} does not match {self.coef.n} regimes")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(1, self.coef.n + 1)))
        if self.theta <= 0:
            raise ModelError("theta must be positive")
        if self.T <= 0:
            raise ModelError("horizon T must be positive")

    @property
    def n(self) -> int:
        return self.coef.n

    @property
    def N(self) -> int:
        return self.coef.N

    def index_of(self, label: int) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ModelError(f"regime {label} not in model regimes {self.labels}") from None

    def with_theta(self, theta: float) -> "FiniteModel":
        return FiniteModel(theta, self.T, self.Q, self.coef, self.labels)


@dataclass(frozen=True)
class CoefficientFamily:
    """Coefficients for a countable regime set.

    Regimes ``1..K`` take the stored rows; every regime ``i > K`` reuses row
    ``K`` (constant continuation).
    """

    table: CoefficientTable

    def materialize(self, n: int) -> CoefficientTable:
        K = self.table.n
        idx = np.minimum(np.arange(n), K - 1)
        t = self.table
        return CoefficientTable(t.r[idx], t.mu[idx], t.sigma[idx], t.lam[idx])


@dataclass(frozen=True)
class ModelSpec:
    N: int
    theta: float
    T: float
    d: int
    generator: RegimeGenerator
    coefficients: CoefficientTable
    n_max: int = 64

    def __post_init__(self):
        if self.coefficients.N != self.N:
            raise ModelError(f"coefficients describe {self.coefficients.N} stocks, N={self.N}")
        if self.coefficients.d != self.d:
            raise ModelError(f"sigma has {self.coefficients.d} Brownian columns, d={self.d}")
        if self.generator.mode == "finite" and self.generator.size != self.coefficients.n:
            raise ModelError(
                f"generator has {self.generator.size} regimes but coefficients cover {self.coefficients.n}"
            )

    @property
    def countable(self) -> bool:
        return self.generator.mode == "countable"

    def coefficient_rows(self, n: int) -> CoefficientTable:
        """Coefficients for regimes ``1..n`` (lazily continued for countable models)."""
        if not self.countable:
            if n > self.coefficients.n:
                return CoefficientFamily(self.coefficients).materialize(n)
            return self.coefficients.take(n)
        if n > self.n_max:
            raise ModelError(f"regime level {n} exceeds n_max={self.n_max}")
        return CoefficientFamily(self.coefficients).materialize(n)

    def finite_model(self) -> FiniteModel:
        if self.countable:
            raise ModelError("countable model: build a truncated model first")
        return FiniteModel(self.theta, self.T, self.generator.matrix, self.coefficients)


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

def absorbing_coefficients(theta: float, N: int, d: int) -> tuple:
    """Coefficients of the absorbing regime: ``r = 0``, ``mu = 0``,
    ``lambda = theta/2``, ``sigma sigma^T = 4/(2+theta) I``."""
    if d < N:
        raise ModelError(f"absorbing regime needs d >= N, got d={d}, N={N}")
    sigma = np.zeros((N, d))
    sigma[:, :N] = np.sqrt(4.0 / (2.0 + theta)) * np.eye(N)
    lam = np.full((1 << N, N), theta / 2.0)
    return 0.0, np.zeros(N), sigma, lam


@dataclass(frozen=True)
class TruncatedModel:
    n: int
    a_n: np.ndarray
    base: Optional[ModelSpec] = field(default=None, compare=False)

    def as_finite(self) -> FiniteModel:
        if self.base is None:
            raise ModelError("truncated generator has no model attached")
        spec = self.base
        rows = spec.coefficient_rows(self.n)
        r0, mu0, sig0, lam0 = absorbing_coefficients(spec.theta, spec.N, spec.d)
        coef = CoefficientTable(
            np.concatenate([[r0], rows.r]),
            np.vstack([mu0[None], rows.mu]),
            np.concatenate([sig0[None], rows.sigma]),
            np.concatenate([lam0[None], rows.lam]),
        )
        return FiniteModel(spec.theta, spec.T, self.a_n, coef, labels=tuple(range(self.n + 1)))


def truncate_generator(gen: RegimeGenerator, n: int, base: Optional[ModelSpec] = None) -> TruncatedModel:
    """Generator of the chain killed (sent to state 0) on leaving ``{1..n}``.

    Row ``m`` of the result puts ``-sum_{i<=n} q_mi`` on column 0; row 0 is
    zero.  For countable generators the escape mass is cross-checked against
    ``tail(m, n)``.
    """
    if n < 1:
        raise ModelError(f"truncation level must be >= 1, got {n}")
    B = gen.block(n)
    escape = -B.sum(axis=1)
    if gen.mode == "countable":
        for m in range(1, n + 1):
            t = gen.row_tail(m, n)
            if abs(t - escape[m - 1]) > TAIL_TOL:
                raise ModelError(
                    f"tail({m},{n})={t!r} inconsistent with row block (escape mass {escape[m - 1]!r})"
                )
    if np.any(escape < -TAIL_TOL):
        i = int(np.argmin(escape)) + 1
        raise ModelError(f"row {i} of the {n}-block has positive sum {-escape[i - 1]!r}")
    escape = np.maximum(escape, 0.0)
    A = np.zeros((n + 1, n + 1))
    A[1:, 1:] = B
    A[1:, 0] = escape
    # restore exact conservativeness lost to rounding
    for m in range(1, n + 1):
        A[m, m] = -(A[m, :m].sum() + A[m, m + 1:].sum())
    A.setflags(write=False)
    return TruncatedModel(n, A, base)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    regime: Optional[int] = None
    state: Optional[str] = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def __bool__(self) -> bool:
        return self.ok

    def add(self, code, message, regime=None, state=None):
        self.issues.append(Issue(code, message, regime, state))

    def as_dict(self) -> dict:
        return {"valid": self.ok, "issues": [i.as_dict() for i in self.issues]}


def _check_generator_rows(Q: np.ndarray, labels, report: ValidationReport, row_tol: float, tails=None):
    n = Q.shape[0]
    for a in range(n):
        i = labels[a]
        if Q[a, a] > 0:
            report.add("generator.diagonal", f"q_ii > 0 at i={i}", regime=i)
        off = np.delete(Q[a], a)
        if np.any(off < 0):
            report.add("generator.offdiagonal", f"negative off-diagonal rate in row i={i}", regime=i)
        s = Q[a].sum() + (0.0 if tails is None else tails[a])
        if abs(s) > row_tol:
            report.add("generator.row_sum", f"row sum != 0 at i={i} (sum={s:.3e})", regime=i)


def validate_model(
    spec: ModelSpec,
    row_tol: float = ROW_SUM_TOL,
    pd_floor: float = PD_FLOOR,
    strict: Optional[tuple] = None,
    n_check: Optional[int] = None,
) -> ValidationReport:
    """Collect every violated structural assumption; never raises.

    ``strict=(delta, K)`` additionally checks ``delta <= lambda <= K`` and
    ``r + |mu| <= K``.  Countable models are checked on regimes ``1..n_check``
    (default: the stored coefficient rows, at least 8).
    """
    report = ValidationReport()
    if not spec.theta > 0:
        report.add("theta", "theta must be positive")
    if not spec.T > 0:
        report.add("horizon", "horizon T must be positive")
    if spec.d < spec.N:
        report.add("dimension", f"d={spec.d} < N={spec.N}: survivor Gram matrices cannot all be definite")
    if spec.countable:
        n = n_check or max(spec.coefficients.n, 8)
        gen = spec.generator
        Q = gen.block(n)
        tails = np.array([gen.row_tail(i, n) for i in range(1, n + 1)])
        if np.any(tails < -row_tol):
            report.add("generator.tail", "negative row tail")
        for i in range(1, n + 1):
            if gen.row_tail(i, n + 1) > gen.row_tail(i, n) + row_tol:
                report.add("generator.tail", f"tail({i}, n) increasing in n", regime=i)
        _check_generator_rows(Q, list(range(1, n + 1)), report, row_tol, tails)
        coef = spec.coefficient_rows(n)
    else:
        Q = spec.generator.matrix
        _check_generator_rows(Q, list(range(1, Q.shape[0] + 1)), report, row_tol)
        coef = spec.coefficients
    N = spec.N
    gram = coef.gram()
    for a in range(coef.n):
        i = a + 1
        if coef.r[a] < 0:
            report.add("interest", f"negative interest rate at i={i}", regime=i)
        if not np.all(np.isfinite(coef.sigma[a])) or not np.all(np.isfinite(coef.mu[a])):
            report.add("coefficients.finite", f"non-finite mu/sigma at i={i}", regime=i)
        if strict is not None and coef.r[a] + np.linalg.norm(coef.mu[a]) > strict[1]:
            report.add("strict.drift", f"r + |mu| exceeds K at i={i}", regime=i)
        for mask in range(1 << N):
            alive = survivors(mask, N)
            z = bitstring(mask, N)
            if alive:
                S = gram[a][np.ix_(alive, alive)]
                eig = np.linalg.eigvalsh(S).min() if np.all(np.isfinite(S)) else -np.inf
                if eig < pd_floor:
                    report.add(
                        "sigma.definite",
                        f"survivor Gram matrix not positive definite at i={i}, z={z} (min eig {eig:.2e})",
                        regime=i, state=z,
                    )
            lam = coef.lam[a, mask, alive]
            if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
                report.add("lambda.positive", f"non-positive default intensity at i={i}, z={z}", regime=i, state=z)
            if strict is not None and (np.any(lam < strict[0]) or np.any(lam > strict[1])):
                report.add("strict.lambda", f"intensity outside [delta, K] at i={i}, z={z}", regime=i, state=z)
    return report
