import numpy as np
import pytest
from scipy.special import expit, logit

from design_types import Arm, WorkingModelLayout
from logistic_irls import (LIKELIHOOD_RTOL, MAX_ITER, SCORE_TOL, VARIANCE_FLOOR, build_design_matrix,
                           build_design_row, conditional_variance_binary, fit_logistic_irls, predict_mean_binary,
                           predict_means)


def saturated_data():
    """
    Ten records per (a, x) cell with known success counts.
    """
    successes = {(0, 0): 3, (1, 0): 6, (0, 1): 2, (1, 1): 7}
    a, x, y = [], [], []
    for (arm, cell), count in successes.items():
        a += [arm] * 10
        x += [cell] * 10
        y += [1] * count + [0] * (10 - count)
    return np.array(a), np.array(x, dtype=float)[:, None], np.array(y, dtype=float)


def test_design_layouts():
    x = np.array([[0.5, -1.0], [2.0, 3.0]])
    interaction = build_design_matrix(np.array([1, 0]), x)
    np.testing.assert_array_equal(interaction, [[1, 1, 0.5, -1.0, 0.5, -1.0], [1, 0, 2.0, 3.0, 0, 0]])
    main = build_design_matrix(1, x, WorkingModelLayout.main_effects)
    np.testing.assert_array_equal(main, [[1, 1, 0.5, -1.0], [1, 1, 2.0, 3.0]])
    np.testing.assert_array_equal(build_design_row(Arm.experimental, [0.5, -1.0]), interaction[0])


def test_saturated_fit_reproduces_cell_log_odds():
    a, x, y = saturated_data()
    fit = fit_logistic_irls(build_design_matrix(a, x), y)
    assert fit.converged
    assert fit.max_abs_score <= SCORE_TOL
    b0, ba, bx, bax = fit.coefficients
    assert b0 == pytest.approx(np.log(3.0 / 7.0), abs=1e-8)
    assert ba == pytest.approx(logit(0.6) - logit(0.3), abs=1e-8)
    assert bx == pytest.approx(logit(0.2) - logit(0.3), abs=1e-8)
    assert bax == pytest.approx(logit(0.7) - logit(0.6) - logit(0.2) + logit(0.3), abs=1e-8)
    assert predict_mean_binary(fit, Arm.experimental, [1.0]) == pytest.approx(0.7, abs=1e-8)


def test_converged_fit_has_small_score():
    rng = np.random.default_rng(4)
    n = 400
    x = rng.normal(size=(n, 2))
    a = rng.integers(0, 2, size=n)
    features = build_design_matrix(a, x)
    y = (rng.random(n) < expit(features @ np.array([-0.5, 0.8, 0.3, -0.4, 0.2, 0.1]))).astype(float)
    fit = fit_logistic_irls(features, y)
    assert fit.converged
    score = features.T @ (y - expit(features @ fit.coefficients))
    assert np.max(np.abs(score)) <= 1e-8


def test_starting_at_the_solution_takes_no_steps():
    a, x, y = saturated_data()
    features = build_design_matrix(a, x)
    fit = fit_logistic_irls(features, y)
    again = fit_logistic_irls(features, y, start=fit.coefficients)
    assert again.converged
    assert again.iterations == 0


def test_rank_deficient_design_drops_columns():
    a, x, y = saturated_data()
    features = build_design_matrix(a, x, WorkingModelLayout.main_effects)
    duplicated = np.column_stack([features, features[:, 2]])
    fit = fit_logistic_irls(duplicated, y)
    assert fit.converged
    assert fit.dropped_columns == (3,)
    assert fit.coefficients[3] == 0.0


def test_separation_stops_without_convergence():
    x = np.linspace(-1, 1, 20)[:, None]
    y = (x[:, 0] > 0).astype(float)
    features = np.column_stack([np.ones(20), x])
    fit = fit_logistic_irls(features, y)
    assert not fit.converged
    assert np.max(np.abs(fit.coefficients)) > 15.0


def test_iteration_cap():
    a, x, y = saturated_data()
    fit = fit_logistic_irls(build_design_matrix(a, x), y, max_iter=1)
    assert fit.iterations == 1
    assert not fit.converged


def test_predict_means_checks_layout():
    a, x, y = saturated_data()
    fit = fit_logistic_irls(build_design_matrix(a, x), y)
    means = predict_means(fit, 0, np.array([[0.0], [1.0]]))
    np.testing.assert_allclose(means, [0.3, 0.2], atol=1e-8)
    with pytest.raises(ValueError):
        predict_means(fit, 0, np.zeros((2, 2)))


def test_conditional_variance_is_floored():
    np.testing.assert_allclose(conditional_variance_binary(np.array([0.5, 1.0, 0.0])),
                               [0.25, VARIANCE_FLOOR, VARIANCE_FLOOR])
    assert conditional_variance_binary(0.2) == pytest.approx(0.16)


@pytest.mark.parametrize('columns', [(0, 1, 2), (0,), (1, 2)])
@pytest.mark.parametrize('seed', [1, 2, 3, 4, 5])
def test_setting1_fits_converge_with_rising_likelihood(setting1_population, columns, seed):
    from population import PopulationGenerator
    rng = np.random.default_rng(seed)
    generator = PopulationGenerator(setting1_population)
    w = generator.draw_covariates(500, rng)
    y1, y0 = generator.draw_potential_outcomes(w, rng)
    a = (rng.random(500) < 0.5).astype(int)
    features = build_design_matrix(a, w[:, list(columns)])
    fit = fit_logistic_irls(features, np.where(a == 1, y1, y0))
    assert fit.converged
    assert fit.iterations < MAX_ITER
    assert fit.max_abs_score <= SCORE_TOL
    trace = np.asarray(fit.log_likelihoods)
    assert len(trace) == fit.iterations + 1
    assert np.all(np.diff(trace) >= -LIKELIHOOD_RTOL * np.abs(trace[:-1]))
