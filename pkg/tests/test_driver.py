import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absdelab import scenarios
from absdelab.driver import (
    AnticipatedFunctional,
    DriverSpec,
    StructureParams,
    UnsupportedCheckError,
    anticipated_raw,
    check_A_gamma,
    check_structure_condition,
    j_gamma,
    make_probes,
    regularize_driver,
    truncate_value,
)
from absdelab.forward import MarkMeasureSpec, TimeGrid

GRID = TimeGrid.uniform(1.0, 20)
MARKS = MarkMeasureSpec.atoms(([-0.5, 0.05, 0.5, 2.0], [0.25, 0.25, 0.25, 0.25]))
finite = st.floats(-50, 50, allow_nan=False)


def zero_driver(marks=MARKS, **kw):
    return DriverSpec(f=lambda t, x, a, y, z, psi: np.zeros(x.shape[0]), xi=lambda x: np.zeros(x.shape[0]),
                      params=StructureParams(**kw), marks=marks, xi_sup=0.0)


def test_structure_params_validated():
    with pytest.raises(ValueError):
        StructureParams(gamma=0.0)
    with pytest.raises(ValueError):
        StructureParams(delta=-1.0)


def test_j_gamma_values():
    assert j_gamma(1.0, 0.0) == 0.0
    assert j_gamma(1.0, math.log(2)) == pytest.approx(1 - math.log(2), rel=1e-14)
    assert j_gamma(2.0, 3.0) - 3 * j_gamma(2.0, 1.0) >= 0


def test_j_gamma_overflow():
    with pytest.raises(OverflowError):
        j_gamma(1.0, 800.0)


@given(st.floats(0.05, 5), st.floats(-20, 20), st.floats(-20, 20))
def test_j_gamma_convex_nonnegative(g, u, v):
    assert j_gamma(g, u) >= 0
    mid = j_gamma(g, 0.5 * (u + v))
    assert mid <= 0.5 * (j_gamma(g, u) + j_gamma(g, v)) + 1e-9 * (1 + abs(mid))


@given(st.floats(0.05, 3), st.floats(-3, 3), st.integers(1, 5))
def test_j_gamma_superlinear(g, u, k):
    assert j_gamma(g, k * u) - k * j_gamma(g, u) >= -1e-9 * (1 + abs(j_gamma(g, k * u)))


def test_truncate_examples():
    assert truncate_value(2, 3) == 2
    assert truncate_value(2, -5) == -2
    assert truncate_value(2, 1.5) == 1.5


@given(st.floats(0.01, 100), finite, finite)
def test_truncate_properties(m, x, y):
    px, py = truncate_value(m, x), truncate_value(m, y)
    assert truncate_value(m, px) == px
    assert abs(px - py) <= abs(x - y)
    assert abs(px) <= abs(x)


def test_running_sup_raw():
    Y = np.array([[1.0, -4.0], [-3.0, 2.0], [2.0, 1.0]])
    out = anticipated_raw(Y, AnticipatedFunctional.running_sup_abs(), TimeGrid.uniform(1.0, 2))
    assert out.tolist() == [[3.0, 4.0], [3.0, 2.0], [2.0, 1.0]]


def test_deferred_value_raw_clamps_to_terminal():
    grid = TimeGrid.uniform(1.0, 4)
    Y = np.arange(5.0)[:, None] * np.ones((1, 2))
    out = anticipated_raw(Y, AnticipatedFunctional.deferred_value(0.5), grid)
    assert out[:, 0].tolist() == [2.0, 3.0, 4.0, 4.0, 4.0]


def test_path_integral_raw():
    grid = TimeGrid.uniform(1.0, 4)
    Y = np.ones((5, 3))
    out = anticipated_raw(Y, AnticipatedFunctional.path_integral(), grid)
    assert np.allclose(out[:, 0], 1.0 - grid.times)


def test_regularize_transparent_in_band():
    sc = scenarios.build("entropic", {"model": {"jump_intensity": 1.0}})
    drv = sc.driver
    fm = regularize_driver(drv, 16.0)
    assert fm.globally_lipschitz and fm.params == drv.params
    rng = np.random.default_rng(0)
    z, psi = rng.uniform(-1, 1, (20, 1)), rng.uniform(-1, 1, (20, drv.marks.Q))
    args = (0.0, np.zeros((20, 1)), np.zeros(20), np.zeros(20), z, psi)
    assert np.array_equal(fm.evaluate(*args), drv.evaluate(*args))


def test_regularize_clamps_z():
    drv = scenarios.entropic_driver(2.0, MarkMeasureSpec.empty(), lambda x: 0 * x[:, 0], 0.0)
    fm = regularize_driver(drv, 1.0)
    val = fm.evaluate(0.0, np.zeros((1, 1)), np.zeros(1), np.zeros(1), np.array([[3.0]]), np.zeros((1, 0)))
    assert val[0] == pytest.approx(0.5 * 2.0 * 1.0)


def test_regularize_cuts_small_marks():
    g = 1.0
    drv = scenarios.entropic_driver(g, MARKS, lambda x: 0 * x[:, 0], 0.0)
    m = 4.0
    psi = np.full((1, MARKS.Q), 0.7)
    val = regularize_driver(drv, m).evaluate(0.0, np.zeros((1, 1)), np.zeros(1), np.zeros(1), np.zeros((1, 1)), psi)
    keep = np.abs(MARKS.e) >= 1 / m
    oracle = sum(w * (math.exp(g * 0.7) - 1 - g * 0.7) / g for w, k in zip(MARKS.w, keep) if k)
    assert val[0] == pytest.approx(oracle, rel=1e-13)


def test_structure_zero_driver_passes():
    drv = zero_driver()
    assert check_structure_condition(drv, make_probes(drv, GRID), GRID)["passed"]


def test_structure_entropic_saturates_upper_envelope():
    drv = scenarios.entropic_driver(1.0, MARKS, lambda x: np.sin(x[:, 0]), 1.0)
    rep = check_structure_condition(drv, make_probes(drv, GRID, scale=2.0), GRID)
    assert rep["passed"]
    assert abs(rep["worst_slack"]) < 1e-9


def test_structure_double_quadratic_fails():
    drv = DriverSpec(f=lambda t, x, a, y, z, psi: np.sum(z**2, axis=1), xi=lambda x: 0 * x[:, 0],
                     params=StructureParams(gamma=1.0), xi_sup=0.0)
    probes = make_probes(drv, GRID, n=64)
    rep = check_structure_condition(drv, probes, GRID)
    assert not rep["passed"]
    zz = float(np.min(0.5 * np.sum(probes.z**2, axis=1) - np.sum(probes.z**2, axis=1)))
    assert rep["worst_slack"] == pytest.approx(zz, rel=1e-12)


@given(st.sampled_from([0.5, 1.0, 2.0, 8.0, 64.0]))
@settings(max_examples=5, deadline=None)
def test_structure_inherited_by_regularization(m):
    drv = scenarios.build("anticipated_sup").driver
    assert check_structure_condition(regularize_driver(drv, m), make_probes(drv, GRID, n=64), GRID)["passed"]


def test_A_gamma_missing_kernel():
    drv = zero_driver()
    with pytest.raises(UnsupportedCheckError):
        check_A_gamma(drv, make_probes(drv, GRID), GRID)


def test_A_gamma_psi_independent():
    drv = DriverSpec(f=lambda t, x, a, y, z, psi: y, xi=lambda x: 0 * x[:, 0], params=StructureParams(beta=1.0),
                     marks=MARKS, gamma_kernel=lambda *a: np.zeros(MARKS.Q))
    assert check_A_gamma(drv, make_probes(drv, GRID, n=64), GRID)["passed"]


def test_A_gamma_linear_identity():
    c = 0.7
    eta = np.minimum(1.0, np.abs(MARKS.e))
    drv = DriverSpec(f=lambda t, x, a, y, z, psi: psi @ (MARKS.w * c * eta), xi=lambda x: 0 * x[:, 0],
                     params=StructureParams(), marks=MARKS, gamma_kernel=lambda *a: c * eta,
                     kernel_bounds=(0.0, c))
    rep = check_A_gamma(drv, make_probes(drv, GRID, n=64), GRID)
    assert rep["passed"] and abs(rep["worst_linearisation_slack"]) < 1e-9


def test_A_gamma_entropic_slope():
    marks = MarkMeasureSpec.atoms(([-0.5, 0.5, 2.0], [0.3, 0.3, 0.4]))
    drv = scenarios.entropic_driver(1.0, marks, lambda x: np.sin(x[:, 0]), 1.0, kernel_M=0.5)
    assert drv.gamma_kernel is not None
    assert check_A_gamma(drv, make_probes(drv, GRID, n=128), GRID, M=0.5)["passed"]


def test_kernel_bounds_validated():
    with pytest.raises(ValueError):
        DriverSpec(f=None, xi=None, params=StructureParams(), gamma_kernel=lambda *a: 0, kernel_bounds=(-1.0, 0.0))
