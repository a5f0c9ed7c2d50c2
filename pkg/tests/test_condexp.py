import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absdelab.condexp import (
    IllConditionedError,
    Projector,
    RegressionBasis,
    estimate_anticipated,
    extract_psi,
    extract_Z,
    fit_conditional,
)
from absdelab.driver import AnticipatedFunctional
from absdelab.forward import ForwardModel, MarkMeasureSpec, TimeGrid

from .conftest import within_se


def test_basis_validation_and_size():
    with pytest.raises(ValueError):
        RegressionBasis(degree=-1)
    with pytest.raises(ValueError):
        RegressionBasis(ridge=-1e-3)
    assert RegressionBasis(3).size(1) == 4
    assert RegressionBasis(2).size(2) == 6


def test_constant_targets(rng):
    x = rng.standard_normal(1000)
    fit = fit_conditional(x, np.full(1000, 2.5), RegressionBasis())
    assert np.allclose(fit.fitted, 2.5, atol=1e-6)
    assert np.all(fit.residual_rms >= 0) and np.all(np.isfinite(fit.coef))


def test_linear_target_reproduced(rng):
    x = rng.standard_normal(1000)
    fit = fit_conditional(x, x, RegressionBasis(1, ridge=0.0, winsor=0.0))
    assert np.allclose(fit.fitted, x, atol=1e-10)


def test_brownian_martingale(bm_bundle):
    i = 40
    fit = fit_conditional(bm_bundle.X[i], bm_bundle.X[-1, :, 0], RegressionBasis())
    assert np.sqrt(np.mean((fit.fitted - bm_bundle.X[i, :, 0]) ** 2)) < 0.02
    resid = bm_bundle.X[-1, :, 0] - fit.fitted
    se = np.std(resid**2, ddof=1) / np.sqrt(resid.size)
    assert within_se(np.mean(resid**2), 1.0 - bm_bundle.grid.times[i], se / (2 * np.sqrt(0.6)) * 2)


def test_rank_deficient_without_ridge():
    x = np.repeat([0.0, 1.0], 50)
    with pytest.raises(IllConditionedError, match="ridge"):
        fit_conditional(x, x, RegressionBasis(4, ridge=0.0, winsor=0.0))
    fit_conditional(x, x, RegressionBasis(4, ridge=1e-8, winsor=0.0))


def test_too_few_samples():
    with pytest.raises(ValueError):
        fit_conditional(np.arange(3.0), np.arange(3.0), RegressionBasis(5))


def test_multivariate_tower(rng):
    x = rng.standard_normal((2000, 2))
    g = 1 + x[:, 0] * x[:, 1] - x[:, 1] ** 2
    fit = fit_conditional(x, g, RegressionBasis(2, ridge=0.0, winsor=0.0))
    assert np.allclose(fit.fitted, g, atol=1e-9)
    assert np.allclose(fit(x[:5]), g[:5], atol=1e-9)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_fit_is_affine(a, b, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal(300)
    t = np.sin(x) + r.standard_normal(300)
    proj = Projector(x, RegressionBasis(3, ridge=0.0))
    lhs = proj.fit(a + b * t).fitted
    rhs = a + b * proj.fit(t).fitted
    assert np.allclose(lhs, rhs, atol=1e-8 * (1 + abs(a) + abs(b)))


def test_bounded_fit_stays_in_target_range(rng):
    x = rng.standard_normal(2000)
    t = np.clip(x, -0.5, 0.5)
    fit = Projector(x, RegressionBasis(5)).fit(t, bounded=True)
    assert fit.fitted.min() >= -0.5 and fit.fitted.max() <= 0.5
    assert np.all(np.abs(fit(np.array([-30.0, 30.0]))) <= 0.5)


def test_anticipated_constant_Y():
    grid = TimeGrid.uniform(1.0, 10)
    Y = np.full((11, 200), -1.25)
    x = np.random.default_rng(0).standard_normal(200)
    a = estimate_anticipated(Y, AnticipatedFunctional.running_sup_abs(), 3, x, RegressionBasis(), grid)
    assert np.allclose(a, 1.25, atol=1e-7)


def test_anticipated_none_is_zero():
    grid = TimeGrid.uniform(1.0, 10)
    out = estimate_anticipated(np.ones((11, 50)), AnticipatedFunctional.none(), 2, np.zeros(50), RegressionBasis(), grid)
    assert np.array_equal(out, np.zeros(50))


def test_anticipated_decreasing_Y():
    grid = TimeGrid.uniform(1.0, 10)
    Y = np.tile((2.0 - grid.times)[:, None], (1, 100))
    x = np.random.default_rng(0).standard_normal(100)
    a = estimate_anticipated(Y, AnticipatedFunctional.running_sup_abs(), 4, x, RegressionBasis(), grid)
    assert np.allclose(a, Y[4], atol=1e-7)


def test_anticipated_deferred_hits_terminal(bm_bundle):
    grid = bm_bundle.grid
    xi = np.sin(bm_bundle.X[-1, :, 0])
    Y = np.zeros((grid.N + 1, bm_bundle.P))
    Y[-1] = xi
    i = 70
    a = estimate_anticipated(Y, AnticipatedFunctional.deferred_value(0.5), i, bm_bundle.X[i], RegressionBasis(), grid)
    direct = fit_conditional(bm_bundle.X[i], xi, RegressionBasis()).fitted
    assert np.allclose(a, direct)


def test_extract_Z_constant_and_zero_increment(bm_bundle):
    i = 10
    dt = bm_bundle.step_dt(i)
    z = extract_Z(np.full(bm_bundle.P, 3.0), bm_bundle.dW[i], dt, bm_bundle.X[i], RegressionBasis())
    se = 3.0 * np.std(bm_bundle.dW[i]) / dt / np.sqrt(bm_bundle.P)
    assert np.max(np.abs(z)) <= 3 * se
    z0 = extract_Z(bm_bundle.X[i + 1, :, 0], np.zeros((bm_bundle.P, 1)), dt, bm_bundle.X[i], RegressionBasis())
    assert np.array_equal(z0, np.zeros_like(z0))


def test_extract_Z_brownian(bm_bundle):
    i = 50
    dt = bm_bundle.step_dt(i)
    z = extract_Z(bm_bundle.X[i + 1, :, 0], bm_bundle.dW[i], dt, bm_bundle.X[i], RegressionBasis())
    # uncentred estimator has per-path sd about 1 / sqrt(P) after projection on the constant
    se = 1.0 / np.sqrt(bm_bundle.P)
    assert within_se(z.mean(), 1.0, se)


@given(st.floats(-3, 3))
@settings(max_examples=10, deadline=None)
def test_extract_Z_synthetic(z0):
    r = np.random.default_rng(7)
    P, dt = 20000, 0.01
    x = r.standard_normal(P)
    dW = r.standard_normal((P, 1)) * np.sqrt(dt)
    z = extract_Z(1.0 + z0 * dW[:, 0], dW, dt, x, RegressionBasis(2))
    se = abs(z0) * np.std(dW[:, 0] ** 2 / dt, ddof=1) / np.sqrt(P)
    assert abs(z.mean() - z0) <= 3 * se + 1e-6


def test_extract_psi_cases():
    marks = MarkMeasureSpec.atoms(([0.5, -1.0], [1.0, 1.0]))
    X = np.array([[1.0], [2.0]])
    no_jump = ForwardModel.constant(0.0, 1.0)
    assert np.array_equal(extract_psi(lambda x: x[:, 0], X, no_jump, marks, 0.0), np.zeros((2, 2)))
    model = ForwardModel(n=1, d=1, jump=lambda t, x, e, c: e[:, None] + 0.0 * x)
    psi = extract_psi(lambda x: x[:, 0], X, model, marks, 0.0)
    assert np.array_equal(psi, np.array([[0.5, -1.0], [0.5, -1.0]]))
    psi2 = extract_psi(lambda x: x[:, 0] ** 2, np.array([[1.0]]), model, marks, 0.0)
    assert psi2[0, 0] == 1.25
