import numpy as np
import pytest
from hypothesis import given, strategies as st

from rscredit.model import (
    CoefficientTable, DefaultState, FiniteModel, ModelError, ModelSpec, RegimeGenerator, absorbing_coefficients,
    geometric_generator, neighbor, states_by_cardinality, truncate_generator, validate_model,
)
from rscredit.simulation import path_rng, simulate_chain

from conftest import random_coefficients, random_generator


def _spec(Q, coef, theta=1.0):
    return ModelSpec(coef.N, theta, 1.0, coef.d, RegimeGenerator.finite(Q), coef)


# default states ------------------------------------------------------------

def test_neighbor_examples():
    assert str(neighbor(DefaultState.from_string("0000"), 2)) == "0100"
    assert str(neighbor(DefaultState.from_string("1111"), 1)) == "0111"


@given(st.integers(1, 12).flatmap(lambda N: st.tuples(st.just(N), st.integers(0, (1 << N) - 1), st.integers(1, N))))
def test_neighbor_is_involution(args):
    N, bits, j = args
    z = DefaultState(bits, N)
    assert neighbor(neighbor(z, j), j) == z
    assert abs(neighbor(z, j).cardinality - z.cardinality) == 1


def test_neighbor_index_out_of_range():
    with pytest.raises(IndexError):
        neighbor(DefaultState(0, 3), 4)
    with pytest.raises(IndexError):
        neighbor(DefaultState(0, 3), 0)


def test_bitstring_convention():
    z = DefaultState.from_string("100")
    assert z.defaulted(1) and not z.defaulted(2)
    assert z.bits == 1
    assert z.survivors() == [2, 3]


def test_states_by_cardinality_small():
    assert [[str(z) for z in layer] for layer in states_by_cardinality(1)] == [["1"], ["0"]]
    layers = [[str(z) for z in layer] for layer in states_by_cardinality(2)]
    assert layers[0] == ["11"] and sorted(layers[1]) == ["01", "10"] and layers[2] == ["00"]
    assert [len(layer) for layer in states_by_cardinality(3)] == [1, 3, 3, 1]


@pytest.mark.parametrize("N", [1, 2, 4, 7])
def test_states_by_cardinality_complete(N):
    layers = states_by_cardinality(N)
    flat = [z.bits for layer in layers for z in layer]
    assert len(flat) == len(set(flat)) == 1 << N
    for k, layer in zip(range(N, -1, -1), layers):
        assert all(z.cardinality == k for z in layer)
        for z in layer:
            for j in range(1, N + 1):
                assert neighbor(z, j).cardinality in (k - 1, k + 1)


def test_stock_limit():
    with pytest.raises(ModelError):
        states_by_cardinality(21)


# generators and truncation -------------------------------------------------

def test_geometric_block_rows():
    gen = geometric_generator()
    for n in range(1, 12):
        B = gen.block(n)
        np.testing.assert_allclose(B.sum(axis=1), -2.0 ** -(n - 1), rtol=0, atol=1e-15)
        for i in range(1, n + 1):
            assert gen.row_tail(i, n) == pytest.approx(2.0 ** -(n - 1), abs=1e-15)


def test_geometric_truncation_level3():
    t = truncate_generator(geometric_generator(), 3)
    np.testing.assert_allclose(t.a_n[1:, 0], 0.25, atol=1e-15)
    assert np.all(t.a_n[0] == 0)
    np.testing.assert_allclose(t.a_n.sum(axis=1), 0.0, atol=1e-12)


def test_truncation_full_size_finite(rng):
    Q = random_generator(rng, 4)
    t = truncate_generator(RegimeGenerator.finite(Q), 4)
    assert np.allclose(t.a_n[1:, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(t.a_n[1:, 1:], Q, atol=1e-12)


def test_truncation_level1_countable():
    gen = RegimeGenerator(rate=lambda i, j: -1.0 if i == j else 0.5 ** j, tail=lambda i, n: 1.0)
    t = truncate_generator(gen, 1)
    np.testing.assert_array_equal(t.a_n, [[0.0, 0.0], [1.0, -1.0]])


def test_truncation_rejects_inconsistent_tail():
    gen = RegimeGenerator(rate=lambda i, j: -1.0 if i == j else 0.5 ** j, tail=lambda i, n: 0.3)
    with pytest.raises(ModelError, match="tail"):
        truncate_generator(gen, 2)


def test_truncations_share_block():
    gen = geometric_generator()
    for n in range(1, 10):
        a, b = truncate_generator(gen, n).a_n, truncate_generator(gen, n + 1).a_n
        np.testing.assert_array_equal(a[1:, 1:], b[1:n + 1, 1:n + 1])


def test_truncated_chain_stays_in_state_set():
    t = truncate_generator(geometric_generator(), 3)
    for p in range(10_000):
        path = simulate_chain(t, 0.0, 1 + p % 3, 2.0, path_rng(11, p))
        assert path.states.min() >= 0 and path.states.max() <= 3
        hit = np.flatnonzero(path.states == 0)
        if hit.size:
            assert hit[0] == path.states.size - 1


def test_absorbing_coefficients():
    theta = 0.7
    r, mu, sigma, lam = absorbing_coefficients(theta, 3, 4)
    assert r == 0.0 and np.all(mu == 0)
    np.testing.assert_allclose(sigma @ sigma.T, 4.0 / (2.0 + theta) * np.eye(3), atol=1e-15)
    assert np.all(lam == theta / 2)


def test_truncated_model_as_finite(rng):
    coef = random_coefficients(rng, 2, 2)
    spec = ModelSpec(2, 1.0, 1.0, 2, geometric_generator(), coef)
    fm = truncate_generator(spec.generator, 5, spec).as_finite()
    assert fm.labels == (0, 1, 2, 3, 4, 5)
    # constant continuation of the stored rows
    np.testing.assert_array_equal(fm.coef.mu[3], coef.mu[1])
    np.testing.assert_array_equal(fm.coef.mu[1], coef.mu[0])


# validation ----------------------------------------------------------------

def test_validate_valid_model(rng):
    coef = random_coefficients(rng, 2, 2)
    assert validate_model(_spec([[-1.0, 1.0], [1.0, -1.0]], coef)).ok


def test_validate_row_sum(rng):
    coef = random_coefficients(rng, 2, 2)
    rep = validate_model(_spec([[-1.0, 1.1], [1.0, -1.0]], coef))
    assert not rep.ok
    assert any(i.code == "generator.row_sum" and i.regime == 1 for i in rep.issues)
    assert "row sum" in rep.issues[0].message


def test_validate_rank_deficient_sigma(rng):
    coef = random_coefficients(rng, 2, 2)
    sigma = np.array(coef.sigma)
    sigma[1, 1] = sigma[1, 0]
    bad = CoefficientTable(coef.r, coef.mu, sigma, coef.lam)
    rep = validate_model(_spec([[-1.0, 1.0], [1.0, -1.0]], bad))
    hits = [i for i in rep.issues if i.code == "sigma.definite"]
    assert hits and all(i.regime == 2 for i in hits)
    assert {i.state for i in hits} == {"00"}


def test_validate_collects_everything(rng):
    coef = random_coefficients(rng, 2, 1)
    lam = np.array(coef.lam)
    lam[0, 0, 0] = -0.1
    bad = CoefficientTable(-coef.r - 1, coef.mu, coef.sigma, lam)
    rep = validate_model(ModelSpec(1, -1.0, 1.0, 1, RegimeGenerator.finite([[-1.0, 1.0], [2.0, -1.0]]), bad))
    codes = {i.code for i in rep.issues}
    assert {"theta", "interest", "lambda.positive", "generator.row_sum"} <= codes


def test_validate_ignores_defaulted_intensities(rng):
    coef = random_coefficients(rng, 1, 2)
    lam = np.array(coef.lam)
    lam[0, 1, 0] = -5.0          # stock 1 already defaulted in state "10"
    lam[0, 3, :] = np.nan
    spec = ModelSpec(2, 1.0, 1.0, 2, RegimeGenerator.finite([[0.0]]), CoefficientTable(coef.r, coef.mu, coef.sigma, lam))
    assert validate_model(spec).ok


def test_validate_strict_mode(rng):
    coef = random_coefficients(rng, 2, 2)
    spec = _spec([[-1.0, 1.0], [1.0, -1.0]], coef)
    assert validate_model(spec, strict=(0.01, 10.0)).ok
    rep = validate_model(spec, strict=(0.5, 10.0))
    assert any(i.code == "strict.lambda" for i in rep.issues)


def test_finite_model_checks(rng):
    coef = random_coefficients(rng, 2, 1)
    with pytest.raises(ModelError):
        FiniteModel(0.0, 1.0, np.zeros((2, 2)), coef)
    with pytest.raises(ModelError):
        FiniteModel(1.0, 1.0, np.zeros((3, 3)), coef)
