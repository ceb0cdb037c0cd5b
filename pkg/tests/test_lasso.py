import numpy as np
import pytest
from numpy.testing import assert_allclose

from pathkernel.error_handling import ConvergenceError, InvalidInputError
from pathkernel.lasso import (
    fit_similarity,
    frequency_features,
    lasso_fit,
    lasso_path,
    pair_targets,
    penalty_max,
)


def periodic_similarity(period, n=60, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    sums = np.arange(n)
    delta = sums[:, None] - sums[None, :]
    noise_matrix = rng.normal(scale=noise, size=(n, n))
    values = 0.9 * np.cos(2 * np.pi * delta / period) + (noise_matrix + noise_matrix.T) / 2
    return values, sums


def test_pair_targets_use_the_upper_triangle():
    values = np.arange(9, dtype=float).reshape(3, 3)
    deltas, targets = pair_targets(values, np.array([0, 2, 5]))
    assert deltas.tolist() == [-2, -5, -3]
    assert targets.tolist() == [1, 2, 5]
    missing = np.zeros((3, 3), dtype=bool)
    missing[0, 2] = True
    deltas, _ = pair_targets(values, np.array([0, 2, 5]), missing)
    assert deltas.tolist() == [-2, -3]
    with pytest.raises(InvalidInputError):
        pair_targets(values, np.array([0, 1]))


def test_frequency_features():
    features, names = frequency_features(np.array([0.0, 1.0, 2.0]), 2, 4)
    assert names == ["cos_2", "sin_2", "cos_3", "sin_3", "cos_4", "sin_4"]
    assert_allclose(features[:, 0], [1.0, -1.0, 1.0], atol=1e-12)
    with pytest.raises(InvalidInputError):
        frequency_features(np.zeros(2), 5, 3)


@pytest.mark.parametrize("period", [3, 7, 13])
def test_dominant_frequency_is_recovered(period):
    values, sums = periodic_similarity(period)
    selected, fits = fit_similarity(values, sums, 2, 16)
    assert selected.dominant == f"cos_{period}"
    assert len(fits) == 30
    assert selected.nonzero[f"cos_{period}"] > 0


def test_objective_never_increases():
    values, sums = periodic_similarity(7, n=25)
    deltas, targets = pair_targets(values, sums)
    features, names = frequency_features(deltas, 2, 12)
    fit = lasso_fit(features, targets, penalty=1e-3, names=names)
    assert fit.converged
    assert np.all(np.diff(fit.objective_history) <= 1e-12)


def test_penalty_above_the_maximum_zeroes_everything(rng):
    features = rng.standard_normal((50, 4))
    targets = features @ np.array([1.0, 0.0, -2.0, 0.0]) + 3.0
    fit = lasso_fit(features, targets, penalty=penalty_max(features, targets) * 1.01)
    assert not fit.nonzero
    assert fit.dominant is None
    assert fit.intercept == pytest.approx(targets.mean())


def test_small_penalty_recovers_a_sparse_model(rng):
    features = rng.standard_normal((200, 5))
    targets = features @ np.array([1.5, 0.0, -2.0, 0.0, 0.0]) + 0.5
    fit = lasso_fit(features, targets, penalty=1e-4)
    assert_allclose(fit.coef, [1.5, 0.0, -2.0, 0.0, 0.0], atol=1e-2)
    assert fit.intercept == pytest.approx(0.5, abs=1e-2)
    assert_allclose(fit.predict(features), targets, atol=0.05)


def test_constant_columns_get_zero_coefficients(rng):
    features = np.column_stack([rng.standard_normal(30), np.ones(30)])
    fit = lasso_fit(features, 2.0 * features[:, 0], penalty=1e-3)
    assert fit.coef[1] == 0.0
    assert fit.dominant == "x0"


def test_non_convergence_raises_with_the_gap(rng):
    features = rng.standard_normal((40, 6))
    features[:, 1] = features[:, 0] + 0.01 * rng.standard_normal(40)
    targets = features[:, 0] + features[:, 1]
    with pytest.raises(ConvergenceError) as info:
        lasso_fit(features, targets, penalty=1e-6, max_sweeps=1)
    assert info.value.gap > 0
    fit = lasso_fit(features, targets, penalty=1e-6, max_sweeps=1, raise_on_failure=False)
    assert not fit.converged


def test_path_is_warm_started_from_the_largest_penalty(rng):
    features = rng.standard_normal((60, 3))
    targets = 2.0 * features[:, 1]
    fits = lasso_path(features, targets, ["a", "b", "c"], n_lambdas=5)
    penalties = [f.penalty for f in fits]
    assert penalties == sorted(penalties, reverse=True)
    assert np.max(np.abs(fits[0].coef)) < 1e-12
    assert fits[-1].dominant == "b"


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        lasso_fit(np.ones((3, 1)), np.ones(3), penalty=-1.0)
    with pytest.raises(InvalidInputError):
        lasso_fit(np.ones((0, 1)), np.ones(0), penalty=0.1)
