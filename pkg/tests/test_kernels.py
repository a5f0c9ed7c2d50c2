import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absdelab import _pykernels, kernels

try:
    from absdelab import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_python_gram_matches_vandermonde(rng):
    z = rng.standard_normal(500)
    V = np.vander(z, 4, increasing=True)
    assert np.allclose(_pykernels.poly_gram(z, 3), V.T @ V)


def test_suffix_max_abs_small():
    y = np.array([[1.0, -3.0], [-2.0, 1.0], [0.5, 0.0]])
    out = _pykernels.suffix_max_abs(y)
    assert out.tolist() == [[2.0, 3.0], [2.0, 1.0], [0.5, 0.0]]


@needs_ext
@given(st.integers(0, 6), st.integers(1, 400), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_backends_agree(degree, P, seed):
    r = np.random.default_rng(seed)
    z = r.standard_normal(P)
    T = r.standard_normal((P, 2))
    coef = r.standard_normal((degree + 1, 2))
    Y = r.standard_normal((7, P))
    g_c, g_p = _ckernels.poly_gram(z, degree), _pykernels.poly_gram(z, degree)
    assert np.allclose(g_c, g_p, rtol=1e-10, atol=1e-10 * np.abs(g_p).max())
    assert np.allclose(_ckernels.poly_rhs(z, T, degree), _pykernels.poly_rhs(z, T, degree), rtol=1e-10, atol=1e-9)
    assert np.allclose(_ckernels.poly_eval(z, coef), _pykernels.poly_eval(z, coef), rtol=1e-12, atol=1e-10)
    assert np.array_equal(_ckernels.suffix_max_abs(Y), _pykernels.suffix_max_abs(Y))


@needs_ext
def test_use_backend_switches_and_solver_agrees():
    from absdelab import scenarios
    from absdelab.condexp import RegressionBasis
    from absdelab.forward import simulate_paths
    from absdelab.solver import SolverConfig, solve

    sc = scenarios.build("entropic", {"grid": {"N": 20}})
    out = {}
    try:
        for b in ("python", "cython"):
            kernels.use_backend(b)
            bundle = simulate_paths(sc.model, sc.grid, sc.marks, (0.0, 0.0), 3000, 4)
            out[b] = solve(bundle, sc.driver, SolverConfig(), RegressionBasis()).Y0
    finally:
        kernels.use_backend("cython")
    assert out["python"] == pytest.approx(out["cython"], rel=1e-9)
