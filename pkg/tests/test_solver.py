import dataclasses

import numpy as np
import pytest

from absdelab import scenarios
from absdelab.condexp import RegressionBasis
from absdelab.driver import AnticipatedFunctional, DriverSpec, StructureParams
from absdelab.forward import ForwardModel, MarkMeasureSpec, TimeGrid, simulate_paths
from absdelab.solver import (
    DriverEvaluationError,
    NonConvergenceError,
    SolverConfig,
    StructureViolationError,
    WindowSelectionError,
    backward_sweep,
    build_u_map,
    markov_consistency,
    pick_window,
    solve,
    solve_lipschitz_absde,
    solve_qexp_absde,
    window_bounds,
)

B = RegressionBasis()


def bundle_for(sc, P=5000, seed=1, start=None):
    return simulate_paths(sc.model, sc.grid, sc.marks, start or (0.0, sc.x0), P, seed)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(eps_fix=0.0)
    with pytest.raises(ValueError):
        SolverConfig(schedule=(4, 2))
    with pytest.raises(ValueError):
        SolverConfig(beta_weight=-1)


def test_zero_driver_constant_terminal():
    sc = scenarios.build("zero", {"driver": {"xi_constant": 0.75}, "model": {"jump_intensity": 1.0}})
    b = bundle_for(sc, 2000)
    sol = backward_sweep(b, sc.driver, np.zeros_like(b.X[:, :, 0]), SolverConfig(), B)
    assert np.all(sol.Y == 0.75)
    assert np.max(np.abs(sol.Z)) < 1e-9 and np.max(np.abs(sol.psi)) < 1e-9


def test_negative_linear_driver():
    sc = scenarios.build("linear_y", {"driver": {"coefficient": -1.0}})
    sol = solve_lipschitz_absde(bundle_for(sc, 2000), sc.driver, SolverConfig(), B)
    assert sol.Y0 == pytest.approx(np.exp(-1.0), rel=0.01)


def test_linear_y_closed_form():
    sc = scenarios.build("linear_y")
    b = bundle_for(sc, 2000)
    sol = solve_lipschitz_absde(b, sc.driver, SolverConfig(), B)
    assert sol.Y0 == pytest.approx(np.e, rel=0.01)
    assert np.array_equal(sol.Y[-1], sc.driver.xi(b.X[-1]))


def test_running_sup_closed_form():
    sc = scenarios.build("anticipated_sup")
    sol = solve_lipschitz_absde(bundle_for(sc, 2000), sc.driver, SolverConfig(), B)
    assert sol.Y0 == pytest.approx(np.exp(0.5), rel=0.01)
    ratios = [b / a for a, b in zip(sol.trace, sol.trace[1:]) if a > 0]
    assert ratios and ratios[-1] < 0.5


def test_deferred_value_last_window():
    sc = scenarios.build("deferred_value")
    sol = solve_lipschitz_absde(bundle_for(sc, 2000), sc.driver, SolverConfig(), B)
    i = sc.grid.index_of(0.75)
    assert np.mean(sol.Y[i]) == pytest.approx(1.25, rel=0.01)
    assert sol.Y0 == pytest.approx(scenarios.deferred_value_oracle(0.0, 1.0, 0.5, 1.0), rel=0.01)


def test_oracle_on_last_window():
    assert scenarios.deferred_value_oracle(0.75, 1.0, 0.5, 2.0) == pytest.approx(2.5)


def test_brownian_identity_two_sweeps():
    sc = scenarios.build("brownian_identity")
    b = bundle_for(sc, 20000)
    sol = solve_lipschitz_absde(b, sc.driver, SolverConfig(), B)
    assert len(sol.trace) == 2 and sol.trace[1] == 0.0
    assert np.sqrt(np.mean((sol.Y[50] - b.X[50, :, 0]) ** 2)) < 0.02
    assert abs(np.mean(sol.Z[:100]) - 1.0) < 0.01


def test_fixed_point_idempotence():
    sc = scenarios.build("anticipated_sup")
    b = bundle_for(sc, 2000)
    cfg = SolverConfig()
    sol = solve_lipschitz_absde(b, sc.driver, cfg, B)
    again = backward_sweep(b, sc.driver, sol.Y, cfg, B)
    assert np.max(np.abs(again.Y - sol.Y)) < sol.eps_fix


def test_frozen_prefix_for_late_start():
    sc = scenarios.build("entropic", {"grid": {"N": 20}})
    b = bundle_for(sc, 2000, start=(0.5, 0.3))
    sol = solve(b, sc.driver, SolverConfig(), B)
    s0 = b.start_index
    assert np.all(sol.Y[:s0] == sol.Y[s0]) and np.all(sol.Z[:s0] == 0)


def test_driver_nan_reports_node():
    drv = DriverSpec(f=lambda t, x, a, y, z, psi: np.where(t > 0.5, np.nan, 0.0) * np.ones(x.shape[0]),
                     xi=lambda x: np.zeros(x.shape[0]), params=StructureParams(), xi_sup=0.0,
                     globally_lipschitz=True, name="nanny")
    sc = scenarios.build("zero")
    with pytest.raises(DriverEvaluationError, match="node"):
        solve(bundle_for(sc, 500), drv, SolverConfig(), B)


def test_non_convergence_carries_trace():
    sc = scenarios.build("anticipated_sup", {"driver": {"delta": 4.0}})
    with pytest.raises(NonConvergenceError) as err:
        solve_lipschitz_absde(bundle_for(sc, 500), sc.driver, SolverConfig(max_iter=3, eps_fix=1e-12), B)
    assert len(err.value.trace) == 3


def test_lipschitz_solver_requires_flag():
    sc = scenarios.build("entropic")
    with pytest.raises(ValueError):
        solve_lipschitz_absde(bundle_for(sc, 500), sc.driver, SolverConfig(), B)


def test_qexp_rejects_structure_violation():
    sc = scenarios.build("entropic")
    bad = dataclasses.replace(sc.driver, params=StructureParams(gamma=0.5), globally_lipschitz=False)
    with pytest.raises(StructureViolationError):
        solve_qexp_absde(bundle_for(sc, 500), bad, SolverConfig(), B)


def test_entropic_cole_hopf_small():
    sc = scenarios.build("entropic", {"grid": {"N": 50}})
    b = bundle_for(sc, 20000, seed=3)
    sol = solve_qexp_absde(b, sc.driver, SolverConfig(), B)
    oracle = np.log(np.mean(np.exp(np.sin(b.X[-1, :, 0]))))
    assert abs(sol.Y0 - oracle) / abs(oracle) < 0.02
    assert sol.cascade is not None and sol.cascade.levels[0] == 2.0


def test_tiny_gamma_constant_terminal():
    sc = scenarios.build("entropic", {"driver": {"gamma": 1e-3, "xi_amplitude": 0.0}, "grid": {"N": 20}})
    sol = solve_qexp_absde(bundle_for(sc, 1000), sc.driver, SolverConfig(early_stop=False), B)
    assert np.all(sol.Y == 0.0) and np.all(sol.Z == 0.0)
    assert sol.cascade.distances == [0.0, 0.0, 0.0]


def test_cascade_inert_beyond_bound():
    sc = scenarios.build("entropic", {"grid": {"N": 50}})
    sol = solve_qexp_absde(bundle_for(sc, 20000), sc.driver, SolverConfig(schedule=(1, 2, 4, 8), early_stop=False), B)
    d = sol.cascade.distances
    assert len(d) == 3 and d[-1] < sol.eps_fix and d[-2] < sol.eps_fix


def test_window_bounds_cover_grid():
    grid = TimeGrid.uniform(1.0, 10)
    w = window_bounds(grid, 0, 0.25)
    assert w[0][1] == 10 and w[-1][0] == 0
    assert all(a[0] == b[1] for a, b in zip(w, w[1:]))


def test_pick_window_examples():
    cfg = SolverConfig()
    sc = scenarios.build("zero")
    assert pick_window(sc.driver, bundle_for(sc, 500), cfg, B) == 1.0
    sc = scenarios.build("anticipated_sup", {"driver": {"delta": 0.4}})
    assert pick_window(sc.driver, bundle_for(sc, 500), cfg, B) == 1.0
    sc = scenarios.build("anticipated_sup", {"driver": {"delta": 4.0}})
    assert pick_window(sc.driver, bundle_for(sc, 500), cfg, B) <= 1.0 / 8


def test_pick_window_bottoms_out_at_grid_step():
    # a one-step window reads only frozen data, so it is always a contraction
    sc = scenarios.build("anticipated_sup", {"driver": {"delta": 400.0}, "grid": {"N": 4}})
    assert pick_window(sc.driver, bundle_for(sc, 200), SolverConfig(), B) == 0.25


def test_pick_window_no_room_raises():
    sc = scenarios.build("anticipated_sup", {"grid": {"N": 4}})
    b = bundle_for(sc, 100, start=(1.0, 0.0))
    with pytest.raises(WindowSelectionError, match="refine the grid"):
        pick_window(sc.driver, b, SolverConfig(), B)


def test_windowed_large_delta_converges():
    sc = scenarios.build("anticipated_sup", {"driver": {"delta": 4.0}, "grid": {"N": 200}, "model": {"sigma": 0.0}})
    drv = dataclasses.replace(sc.driver, globally_lipschitz=False)
    sol = solve_qexp_absde(bundle_for(sc, 200), drv, SolverConfig(schedule=(1e3,)), B)
    assert sol.window <= 1.0 / 8
    assert sol.Y0 == pytest.approx(np.exp(4.0), rel=0.05)


def test_u_map_constant_and_frozen():
    grid = TimeGrid.uniform(1.0, 10)
    c_drv = DriverSpec(f=lambda t, x, a, y, z, psi: np.zeros(x.shape[0]), xi=lambda x: np.full(x.shape[0], 2.0),
                       params=StructureParams(), xi_sup=2.0, globally_lipschitz=True)
    model = ForwardModel.constant(0.0, 1.0)
    tab = build_u_map(c_drv, model, grid, MarkMeasureSpec.empty(), B, [0.0, 0.5], [-1.0, 1.0], 200, 0)
    assert np.all(tab.u == 2.0) and tab.invalid_count() == 0
    id_drv = dataclasses.replace(c_drv, xi=lambda x: x[:, 0].copy(), xi_sup=None)
    tab = build_u_map(id_drv, ForwardModel.constant(0.0, 0.0), grid, MarkMeasureSpec.empty(), B,
                      [0.0, 0.5, 1.0], [-1.0, 0.0, 2.0], 200, 0)
    assert np.array_equal(tab.u, np.tile([-1.0, 0.0, 2.0], (3, 1)))


def test_u_map_records_errors():
    sc = scenarios.build("anticipated_sup", {"driver": {"delta": 4.0}, "grid": {"N": 10}})
    tab = build_u_map(sc.driver, sc.model, sc.grid, sc.marks, B, [0.0], [0.0], 200, 0,
                      SolverConfig(max_iter=2, eps_fix=1e-14))
    assert tab.invalid_count() == 1 and (0, 0, 0) in tab.errors


def test_markov_consistency_brownian():
    sc = scenarios.build("entropic", {"grid": {"N": 10}})
    b = bundle_for(sc, 4000)
    sol = solve(b, sc.driver, SolverConfig(), B)
    tab = build_u_map(sc.driver, sc.model, sc.grid, sc.marks, B, [0.5], np.linspace(-3, 3, 13), 4000, 5)
    assert markov_consistency(sol, b, tab)["max_rms"] < 0.02


def test_solve_started_at_horizon_is_terminal():
    sc = scenarios.build("entropic", {"grid": {"N": 10}})
    b = bundle_for(sc, 50, start=(1.0, 0.7))
    sol = solve(b, sc.driver, SolverConfig(), B)
    assert sol.Y0 == np.sin(0.7)
    assert sol.cascade.levels == []
