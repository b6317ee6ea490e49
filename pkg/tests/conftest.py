import numpy as np
import pytest

from rscredit.model import CoefficientTable, FiniteModel, ModelSpec, RegimeGenerator


def random_generator(rng, n, scale=1.0):
    Q = rng.uniform(0.05, scale, (n, n))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def random_coefficients(rng, n, N, d=None, lam_range=(0.05, 0.3), sigma_floor=0.3, excess=0.08):
    """Coefficients satisfying the boundedness and nondegeneracy conditions."""
    d = N if d is None else d
    r = rng.uniform(0.0, 0.05, n)
    mu = r[:, None] + rng.uniform(0.0, excess, (n, N))
    sigma = np.zeros((n, N, d))
    for a in range(n):
        A = rng.uniform(-0.05, 0.05, (N, d))   # diagonally dominant for N < 6
        A[:, :N] += sigma_floor * np.eye(N)
        sigma[a] = A
    lam = rng.uniform(*lam_range, (n, 1 << N, N))
    return CoefficientTable(r, mu, sigma, lam)


def random_model(rng, n, N, theta=None, T=1.0, **kw):
    theta = rng.uniform(0.3, 2.0) if theta is None else theta
    return FiniteModel(theta, T, random_generator(rng, n), random_coefficients(rng, n, N, **kw))


def spec_from_model(model: FiniteModel) -> ModelSpec:
    c = model.coef
    return ModelSpec(model.N, model.theta, model.T, c.d, RegimeGenerator.finite(model.Q), c)


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


@pytest.fixture
def two_regime_model():
    Q = np.array([[-1.0, 1.0], [0.5, -0.5]])
    r = np.array([0.02, 0.03])
    mu = np.array([[0.07, 0.06], [0.05, 0.08]])
    sigma = np.array([[[0.35, 0.0], [0.1, 0.3]], [[0.3, 0.0], [0.05, 0.4]]])
    lam = np.zeros((2, 4, 2))
    lam[:, 0] = [[0.2, 0.3], [0.3, 0.1]]
    lam[:, 1] = [[0.1, 0.6], [0.1, 0.4]]
    lam[:, 2] = [[0.5, 0.1], [0.6, 0.1]]
    lam[:, 3] = 0.1
    return FiniteModel(1.0, 1.0, Q, CoefficientTable(r, mu, sigma, lam))
