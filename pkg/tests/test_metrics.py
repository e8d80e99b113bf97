import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from loda.exceptions import ContractError, DegenerateBatchError
from loda.metrics import (
    evaluate_scores,
    fit_logistic,
    logistic4,
    logistic_correct,
    plcc,
    plcc_loss,
    rankdata,
    srcc,
)
from loda.tensor import Tensor, backward

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_hand_values():
    assert srcc([3, 1, 2], [1, 2, 3]) == pytest.approx(-0.5, abs=1e-15)
    assert plcc([1, 2, 4], [1, 2, 3]) == pytest.approx(0.9819805060619657, abs=1e-15)
    loss = plcc_loss(Tensor(np.array([1.0, 2.0, 4.0])), [1, 2, 3]).item()
    assert loss == pytest.approx((1 - 0.9819805060619657) / 2, abs=1e-15)


def test_rankdata_ties_average():
    assert np.array_equal(rankdata([10, 20, 10, 30]), [1.5, 3, 1.5, 4])


def test_srcc_constant_is_zero_plcc_constant_raises():
    assert srcc([1, 1, 1], [1, 2, 3]) == 0.0
    with pytest.raises(DegenerateBatchError):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateBatchError):
        plcc_loss(Tensor(np.ones(3)), [1, 2, 3])


def test_length_checks():
    with pytest.raises(ContractError):
        srcc([1, 2], [1, 2, 3])
    with pytest.raises(ContractError):
        plcc([1], [1])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(3, 40), elements=finite), st.integers(0, 2**31))
def test_srcc_matches_scipy(x, seed):
    y = np.random.default_rng(seed).normal(size=x.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", stats.ConstantInputWarning)
        expected = stats.spearmanr(x, y).statistic
    got = srcc(x, y)
    assert got == pytest.approx(0.0 if np.isnan(expected) else expected, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 50), st.integers(0, 2**31))
def test_plcc_matches_scipy_and_loss_identity(n, seed):
    g = np.random.default_rng(seed)
    x, y = g.normal(size=n), g.normal(size=n)
    assert plcc(x, y) == pytest.approx(stats.pearsonr(x, y).statistic, abs=1e-12)
    assert plcc_loss(Tensor(x), y).item() == pytest.approx((1 - plcc(x, y)) / 2, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 30), st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-5, 5))
def test_correlations_invariant_to_positive_affine(n, seed, a, b):
    g = np.random.default_rng(seed)
    x, y = g.normal(size=n), g.normal(size=n)
    assert srcc(a * x + b, y) == pytest.approx(srcc(x, y), abs=1e-12)
    assert plcc(a * x + b, y) == pytest.approx(plcc(x, y), abs=1e-9)
    assert srcc(-x, y) == pytest.approx(-srcc(x, y), abs=1e-12)


def test_plcc_loss_gradient_is_zero_for_perfect_fit_direction():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward(plcc_loss(x, [2.0, 4.0, 6.0]))
    assert np.allclose(x.grad, 0.0, atol=1e-15)


def test_logistic_recovers_known_curve():
    g = np.random.default_rng(0)
    pred = g.uniform(-1, 1, 200)
    labels = logistic4(pred, 0.0, 1.0, 0.5, 0.1)
    corrected, fit = logistic_correct(pred, labels)
    assert not fit.fallback
    assert plcc(corrected, labels) == pytest.approx(1.0, abs=1e-6)


def test_logistic_is_strictly_increasing():
    g = np.random.default_rng(1)
    x = g.normal(size=50)
    fit = fit_logistic(x, x + g.normal(0, 0.3, 50))
    b1, b2, b3, b4 = fit.beta
    assert b2 > b1 and b4 > 0
    grid = np.linspace(-3, 3, 101)
    assert np.all(np.diff(fit(grid)) >= 0)


@pytest.mark.parametrize("seed", range(10))
def test_logistic_preserves_srcc_and_does_not_hurt_plcc(seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=32)
    y = np.tanh(x) + g.normal(0, 0.2, 32)
    corrected, fit = logistic_correct(x, y)
    assert srcc(corrected, y) == srcc(x, y)
    assert plcc(corrected, y) >= plcc(x, y) - 1e-9


def test_logistic_fallback_on_constant_predictions(caplog):
    corrected, fit = logistic_correct(np.ones(5), np.arange(5.0))
    assert fit.fallback and np.array_equal(corrected, np.ones(5))
    m = evaluate_scores(np.ones(5), np.arange(5.0))
    assert m.logistic_fallback and m.srcc == 0.0 and m.plcc == 0.0
