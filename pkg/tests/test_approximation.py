from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from rscredit.approximation import (
    BOUND_LABEL, error_bound, geometric_bound, run_sequence, solve_level, window_values,
)
from rscredit.dpe_solver import TimeGrid, solve_finite
from rscredit.io import load_config
from rscredit.model import ModelSpec, RegimeGenerator, geometric_generator

from conftest import random_generator, random_model, spec_from_model

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


# escape probability -----------------------------------------------------------------

@pytest.mark.parametrize("method", ["expm", "series"])
def test_geometric_closed_form(method):
    gen = geometric_generator()
    for n in range(1, 21):
        for s in (0.1, 1.0, 5.0):
            for i in (1, n):
                assert error_bound(gen, n, i, s, method=method) == pytest.approx(geometric_bound(n, s), rel=1e-10,
                                                                               abs=1e-15)


def test_series_matches_expm(rng):
    Q = random_generator(rng, 6)
    gen = RegimeGenerator.finite(Q).as_countable()
    for n in range(1, 7):
        for s in (0.3, 2.0):
            for i in range(1, n + 1):
                a = error_bound(gen, n, i, s, method="expm")
                b, info = error_bound(gen, n, i, s, method="series", return_info=True)
                assert b == pytest.approx(a, abs=1e-12)
                assert info["remainder"] <= 1e-12 or info.get("fallback")


def test_series_falls_back_when_terms_too_few():
    val, info = error_bound(geometric_generator(), 3, 1, 5.0, method="series", terms=2, return_info=True)
    assert info["method"] == "expm" and info["fallback"]
    assert val == pytest.approx(geometric_bound(3, 5.0), rel=1e-12)


def test_escape_probability_against_block_exponential(rng):
    Q = random_generator(rng, 7)
    gen = RegimeGenerator.finite(Q).as_countable()
    for n in (2, 4, 6):
        E = scipy.linalg.expm(1.5 * Q[:n, :n])
        for i in range(1, n + 1):
            assert error_bound(gen, n, i, 1.5) == pytest.approx(1 - E[i - 1].sum(), abs=1e-12)


def test_escape_probability_monotone():
    gen = geometric_generator()
    vals_n = [error_bound(gen, n, 1, 1.0) for n in range(1, 15)]
    assert all(b <= a for a, b in zip(vals_n, vals_n[1:]))
    vals_s = [error_bound(gen, 5, 2, s) for s in np.linspace(0, 3, 13)]
    assert vals_s[0] == 0.0
    assert all(b >= a for a, b in zip(vals_s, vals_s[1:]))


def test_embedded_finite_chain_never_escapes(rng):
    Q = random_generator(rng, 4)
    gen = RegimeGenerator.finite(Q).as_countable()
    assert all(error_bound(gen, 4, i, 3.0) == pytest.approx(0.0, abs=1e-12) for i in range(1, 5))


def test_error_bound_argument_checks():
    gen = geometric_generator()
    with pytest.raises(ValueError):
        error_bound(gen, 3, 4, 1.0)
    with pytest.raises(ValueError):
        error_bound(gen, 3, 1, -1.0)
    with pytest.raises(ValueError):
        error_bound(gen, 3, 1, 1.0, method="pade")


# truncated solves ------------------------------------------------------------------------

def test_level_absorbing_column_is_one(rng):
    m = random_model(rng, 2, 2, theta=0.7)
    spec = ModelSpec(2, 0.7, 1.0, 2, geometric_generator(), m.coef)
    sol = solve_level(spec, 3, TimeGrid(1.0, 20))
    assert sol.model.labels == (0, 1, 2, 3)
    for tab in sol.tables.values():
        np.testing.assert_allclose(tab[:, 0], 1.0, atol=1e-12)


def test_full_size_level_matches_finite_solve(rng):
    m = random_model(rng, 3, 2, theta=0.9)
    grid = TimeGrid(1.0, 40)
    ref = solve_finite(m, grid)
    spec = ModelSpec(2, 0.9, 1.0, 2, RegimeGenerator.finite(m.Q).as_countable(), m.coef)
    sol = solve_level(spec, 3, grid)
    for mask, tab in ref.tables.items():
        np.testing.assert_allclose(sol.tables[mask][:, 1:], tab, rtol=0, atol=1e-12)


def test_levels_decrease_on_window(rng):
    m = random_model(rng, 2, 2, theta=0.7)
    spec = ModelSpec(2, 0.7, 0.5, 2, geometric_generator(), m.coef)
    grid = TimeGrid(0.5, 20)
    a = window_values(solve_level(spec, 2, grid), 2)
    b = window_values(solve_level(spec, 5, grid), 2)
    for mask in a:
        assert np.all(b[mask] <= a[mask] + 1e-10)


def test_run_sequence_geometric_config():
    _, spec = load_config(CONFIGS / "geometric.json")
    run = run_sequence(spec, (4, 8, 16), TimeGrid(spec.T, 40), tol_sup=1e-5)
    rep = run.report()
    assert rep["monotone"] and rep["converged"]
    assert rep["final_delta"] <= 1e-5
    assert rep["reporting_window"] == [1, 2, 3, 4]
    assert rep["error_bound_label"] == BOUND_LABEL
    assert rep["error_bound"]["4"] == pytest.approx(geometric_bound(4, spec.T), rel=1e-10)
    assert len(rep["sup_deltas"]) == len(rep["levels"]) - 1


def test_run_sequence_stops_early_unless_run_all(rng):
    m = random_model(rng, 2, 1, theta=0.5)
    spec = ModelSpec(1, 0.5, 0.2, 1, geometric_generator(), m.coef)
    grid = TimeGrid(0.2, 10)
    run = run_sequence(spec, (2, 4, 8), grid, tol_sup=1.0)
    assert run.levels == [2, 4] and run.converged
    assert run_sequence(spec, (2, 4, 8), grid, tol_sup=1.0, run_all=True).levels == [2, 4, 8]


def test_run_sequence_rejects_bad_schedule(rng):
    spec = spec_from_model(random_model(rng, 2, 1))
    with pytest.raises(ValueError):
        run_sequence(spec, (4, 4, 8))
    with pytest.raises(ValueError):
        run_sequence(spec, ())
