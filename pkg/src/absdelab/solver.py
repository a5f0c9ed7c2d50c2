"""Backward regression solvers: Picard sweeps, windowed fixed point, truncation cascade, u-map."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bounds import universal_bound_Y
from .condexp import Projector, RegressionBasis, estimate_anticipated, extract_psi, extract_Z
from .driver import (
    DriverSpec,
    anticipated_raw,
    check_structure_condition,
    make_probes,
    regularize_driver,
)
from .forward import ForwardModel, MarkMeasureSpec, PathBundle, TimeGrid, simulate_paths


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace or [])


class StructureViolationError(ValueError):
    pass


class WindowSelectionError(RuntimeError):
    pass


class DriverEvaluationError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    eps_fix: Optional[float] = None
    max_iter: int = 50
    beta_weight: float = 0.0
    window: Optional[float] = None
    schedule: tuple = (2.0, 4.0, 8.0, 16.0)
    p: float = 2.0
    early_stop: bool = True
    check_structure: bool = True

    def __post_init__(self):
        if self.eps_fix is not None and not self.eps_fix > 0:
            raise ValueError("eps_fix must be positive")
        if self.beta_weight < 0:
            raise ValueError("beta_weight must be >= 0")
        sched = tuple(float(m) for m in self.schedule)
        if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
            raise ValueError("truncation schedule must be strictly increasing")
        self.schedule = sched


@dataclass
class CascadeReport:
    levels: list
    distances: list
    traces: list
    eps_fix: float
    window: float


@dataclass
class DiscreteSolution:
    grid: TimeGrid
    Y: np.ndarray  # (N+1, P)
    Z: np.ndarray  # (N+1, P, d)
    psi: np.ndarray  # (N+1, P, Q)
    F: np.ndarray  # (N, P) driver values
    fits: list = field(repr=False)
    start_index: int = 0
    trace: list = field(default_factory=list)
    trace_sp: list = field(default_factory=list)
    event_psi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cascade: Optional[CascadeReport] = None
    window: Optional[float] = None
    eps_fix: Optional[float] = None

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[self.start_index]))

    def pathwise_value(self, bundle: PathBundle) -> np.ndarray:
        """xi + sum of dt * f along each path; its mean equals Y at the start node up to ridge."""
        s0 = self.start_index
        dts = np.array([bundle.step_dt(i) for i in range(s0, self.grid.N)])
        return self.Y[-1] + (dts[:, None] * self.F[s0:]).sum(axis=0)

    def start_se(self, bundle: PathBundle) -> float:
        v = self.pathwise_value(bundle)
        return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def _projector(bundle: PathBundle, i: int, basis: RegressionBasis) -> Projector:
    key = ("proj", i, basis.degree, basis.ridge)
    proj = bundle.cache.get(key)
    if proj is None:
        proj = Projector(bundle.X[i], basis)
        bundle.cache[key] = proj
    return proj


def _events_by_node(bundle: PathBundle):
    ev = bundle.cache.get("events_by_node")
    if ev is None:
        order = np.argsort(bundle.events.node, kind="stable")
        nodes = bundle.events.node[order]
        bounds = np.searchsorted(nodes, np.arange(bundle.grid.N + 1), side="left")
        ev = (order, bounds)
        bundle.cache["events_by_node"] = ev
    return ev


def _fresh_solution(bundle: PathBundle, driver: DriverSpec) -> DiscreteSolution:
    N, P = bundle.grid.N, bundle.P
    Y = np.zeros((N + 1, P))
    Y[N] = np.asarray(driver.xi(bundle.X[N]), dtype=float).reshape(P)
    return DiscreteSolution(
        grid=bundle.grid,
        Y=Y,
        Z=np.zeros((N + 1, P, bundle.model.d)),
        psi=np.zeros((N + 1, P, bundle.marks.Q)),
        F=np.zeros((N, P)),
        fits=[None] * (N + 1),
        start_index=bundle.start_index,
        event_psi=np.zeros(len(bundle.events)),
    )


def _sweep_range(bundle, driver, prev_Y, sol, basis, lo, hi):
    """Backward induction over nodes hi-1 .. lo, writing into ``sol`` in place."""
    grid, X, model, marks = bundle.grid, bundle.X, bundle.model, bundle.marks
    N = grid.N
    raw = None
    if driver.functional.active:
        raw = anticipated_raw(prev_Y, driver.functional, grid, clamp=driver.path_clamp, lo=lo)
    order, bounds = _events_by_node(bundle)
    ev = bundle.events
    for i in range(hi - 1, lo - 1, -1):
        t = grid.times[i]
        dt = bundle.step_dt(i)
        proj = _projector(bundle, i, basis)
        Xi = X[i]
        Yn = sol.Y[i + 1]
        y_hat = proj.fit(Yn, bounded=True).fitted
        z = extract_Z(Yn, bundle.dW[i], dt, Xi, basis, projector=proj, Y_hat=y_hat)
        if i + 1 == N:
            u_next = driver.xi
        else:
            u_next = sol.fits[i + 1] or _projector(bundle, i + 1, basis).fit(Yn, bounded=True)
        psi = extract_psi(u_next, Xi, model, marks, t)
        # explicit in the anticipated argument, like y_hat: the functional is read at t_{i+1}
        a = estimate_anticipated(prev_Y, driver.functional, i + 1, Xi, basis, grid, projector=proj, raw=raw)
        fv = driver.evaluate(t, Xi, a, y_hat, z, psi)
        if not np.all(np.isfinite(fv)):
            bad = int(np.argwhere(~np.isfinite(fv))[0, 0])
            raise DriverEvaluationError(
                f"{driver.name}: non-finite driver value at node {i} (t={t:.6g}), path {bad}"
            )
        fit = proj.fit(Yn + dt * fv, bounded=True)
        sol.Y[i] = fit.fitted
        sol.Z[i] = z
        sol.psi[i] = psi
        sol.F[i] = fv
        sol.fits[i] = fit
        sel = order[bounds[i] : bounds[i + 1]]
        if sel.size and model.jump is not None:
            xs = Xi[ev.path[sel]]
            jumped = xs.copy()
            comps = ev.comp[sel]
            for c in np.unique(comps):
                k = comps == c
                jumped[k] += model.gamma(t, xs[k], ev.mark[sel][k], int(c))
            sol.event_psi[sel] = np.asarray(u_next(jumped)).reshape(-1) - np.asarray(u_next(xs)).reshape(-1)


def _finalize(sol: DiscreteSolution):
    s0 = sol.start_index
    if s0 > 0:
        sol.Y[:s0] = sol.Y[s0]
        sol.Z[:s0] = 0.0
        sol.psi[:s0] = 0.0
        sol.F[:s0] = 0.0
    return sol


def _distance(a, b, times, beta_w, lo, hi):
    if hi <= lo:
        return 0.0
    d = np.max(np.abs(a[lo:hi] - b[lo:hi]), axis=1)
    return float(np.max(np.exp(beta_w * times[lo:hi]) * d))


def _sp_distance(a, b, lo, hi, p):
    if hi <= lo:
        return 0.0
    d = np.max(np.abs(a[lo:hi] - b[lo:hi]), axis=0)
    return float(np.mean(d**p) ** (1.0 / p))


def backward_sweep(bundle: PathBundle, driver: DriverSpec, prev_Y: np.ndarray, config: SolverConfig,
                   basis: RegressionBasis) -> DiscreteSolution:
    """One backward induction with the anticipated argument frozen at ``prev_Y``."""
    sol = _fresh_solution(bundle, driver)
    _sweep_range(bundle, driver, prev_Y, sol, basis, bundle.start_index, bundle.grid.N)
    return _finalize(sol)


def resolve_eps(config: SolverConfig, driver: DriverSpec, bundle: PathBundle) -> float:
    """Picard tolerance: configured value, else 1e-3 of the universal Y bound (or of sup|xi|)."""
    if config.eps_fix is not None:
        return config.eps_fix
    if driver.xi_sup is not None:
        scale = universal_bound_Y(driver.bound_params(bundle.grid.T))
    else:
        scale = float(np.max(np.abs(driver.xi(bundle.X[-1]))))
    return 1e-3 * scale if scale > 0 else 1e-12


def _picard_window(bundle, driver, sol, basis, lo, hi, config, eps):
    """Fixed point in the anticipated argument on nodes [lo, hi), later nodes frozen."""
    times = bundle.grid.times
    prev = sol.Y.copy()
    prev[lo:hi] = 0.0
    trace, trace_sp = [], []
    for _ in range(config.max_iter):
        _sweep_range(bundle, driver, prev, sol, basis, lo, hi)
        trace.append(_distance(sol.Y, prev, times, config.beta_weight, lo, hi))
        trace_sp.append(_sp_distance(sol.Y, prev, lo, hi, config.p))
        if not driver.functional.active and len(trace) == 1:
            # the sweep ignores prev_Y, so a second sweep reproduces it exactly
            trace.append(0.0)
            trace_sp.append(0.0)
        if trace[-1] < eps:
            return trace, trace_sp
        prev[lo:hi] = sol.Y[lo:hi]
    raise NonConvergenceError(
        f"{driver.name}: no convergence on nodes [{lo}, {hi}) after {config.max_iter} iterations; "
        "try a smaller window h",
        trace,
    )


def solve_lipschitz_absde(bundle: PathBundle, driver: DriverSpec, config: SolverConfig,
                          basis: RegressionBasis) -> DiscreteSolution:
    """Picard iteration of backward sweeps from zero on the whole horizon."""
    if not driver.globally_lipschitz:
        raise ValueError(f"{driver.name}: driver is not flagged globally Lipschitz")
    eps = resolve_eps(config, driver, bundle)
    sol = _fresh_solution(bundle, driver)
    trace, trace_sp = _picard_window(bundle, driver, sol, basis, bundle.start_index, bundle.grid.N, config, eps)
    sol.trace, sol.trace_sp, sol.eps_fix = trace, trace_sp, eps
    sol.window = bundle.grid.T - bundle.start_t
    return _finalize(sol)


def window_bounds(grid: TimeGrid, s0: int, h: float) -> list[tuple[int, int]]:
    """Node ranges [lo, hi) of backward windows of length h, latest first."""
    out = []
    hi = grid.N
    j = 1
    while hi > s0:
        lo = max(s0, grid.index_of(grid.T - j * h))
        if lo >= hi:
            lo = hi - 1
        out.append((lo, hi))
        hi = lo
        j += 1
    return out


def pick_window(driver: DriverSpec, bundle: PathBundle, config: SolverConfig, basis: RegressionBasis) -> float:
    """Halve h from the full horizon until the Picard map contracts by <= 1/2 on the last window.

    The contraction factor is estimated from two inputs that differ by a
    constant level on the window: the sup-distance of the two outputs divided
    by that level. The level sits above the frozen tail so running-sup type
    functionals see the whole perturbation.
    """
    grid = bundle.grid
    h = grid.T - bundle.start_t
    dmin = float(np.min(grid.dt))
    while True:
        lo = max(bundle.start_index, grid.index_of(grid.T - h))
        if lo >= grid.N:
            raise WindowSelectionError(
                f"{driver.name}: window fell below the grid step {dmin:.3g}; "
                "refine the grid or reduce the driver constants"
            )
        if not driver.functional.active:
            return h
        sol = _fresh_solution(bundle, driver)
        base = sol.Y.copy()
        base[lo : grid.N] = 0.0
        level = 2.0 * float(np.max(np.abs(base[lo:]))) + 1.0
        if driver.path_clamp is not None:
            level = min(level, float(driver.path_clamp))
        bumped = base.copy()
        bumped[lo : grid.N] = level
        _sweep_range(bundle, driver, base, sol, basis, lo, grid.N)
        y0 = sol.Y.copy()
        _sweep_range(bundle, driver, bumped, sol, basis, lo, grid.N)
        ratio = _distance(sol.Y, y0, grid.times, 0.0, lo, grid.N) / level
        if ratio <= 0.5:
            return h
        h /= 2.0
        if h < dmin * (1 - 1e-9):
            raise WindowSelectionError(
                f"{driver.name}: window fell below the grid step {dmin:.3g}; "
                "refine the grid or reduce the driver constants"
            )


def solve_qexp_absde(bundle: PathBundle, driver: DriverSpec, config: SolverConfig,
                     basis: RegressionBasis) -> DiscreteSolution:
    """Truncation cascade over the m-schedule, each level solved by backward windows.

    The returned solution is the last level solved; ``solution.cascade`` holds
    the sup-distances between successive levels.
    """
    if driver.xi_sup is None:
        raise StructureViolationError(f"{driver.name}: terminal condition must be bounded")
    grid = bundle.grid
    if config.check_structure:
        probes = make_probes(driver, grid, n=256, seed=12345, d=bundle.model.d, n_state=bundle.model.n)
        rep = check_structure_condition(driver, probes, grid)
        if not rep["passed"]:
            raise StructureViolationError(f"{driver.name}: structure condition fails: {rep['violating_probe']}")
    eps = resolve_eps(config, driver, bundle)
    if bundle.start_index >= grid.N:
        # started at the horizon: Y is the terminal condition
        sol = _finalize(_fresh_solution(bundle, driver))
        sol.cascade = CascadeReport([], [], [], eps, 0.0)
        sol.window, sol.eps_fix = 0.0, eps
        return sol
    h = config.window
    if h is None:
        h = pick_window(regularize_driver(driver, config.schedule[-1]), bundle, config, basis)
    h = min(h, grid.T - bundle.start_t) if grid.T > bundle.start_t else h
    windows = window_bounds(grid, bundle.start_index, h)
    s0 = bundle.start_index
    levels, distances, traces = [], [], []
    prev_level = None
    sol = None
    for m in config.schedule:
        drv = regularize_driver(driver, m)
        sol = _fresh_solution(bundle, drv)
        level_trace = []
        for lo, hi in windows:
            tr, _ = _picard_window(bundle, drv, sol, basis, lo, hi, config, eps)
            level_trace.append(tr)
        _finalize(sol)
        levels.append(m)
        traces.append(level_trace)
        sol.trace = [d for tr in level_trace for d in tr]
        if prev_level is not None:
            dist = float(np.max(np.abs(sol.Y[s0:] - prev_level[s0:])))
            distances.append(dist)
            if config.early_stop and dist < eps:
                break
        prev_level = sol.Y.copy()
    sol.cascade = CascadeReport(levels, distances, traces, eps, h)
    sol.window, sol.eps_fix = h, eps
    return sol


def solve(bundle, driver, config, basis) -> DiscreteSolution:
    """Quadratic-exponential solver for bounded data, Picard solver otherwise."""
    if driver.xi_sup is not None and not driver.globally_lipschitz:
        return solve_qexp_absde(bundle, driver, config, basis)
    return solve_lipschitz_absde(bundle, driver, config, basis)


@dataclass
class UTable:
    t_values: np.ndarray
    x_values: np.ndarray
    seeds: tuple
    values: np.ndarray  # (n_seeds, nt, nx)
    se: np.ndarray
    valid: np.ndarray
    errors: dict

    @property
    def u(self) -> np.ndarray:
        return self.values[0]

    def invalid_count(self) -> int:
        return int((~self.valid).sum())

    def interpolate(self, t_index: int, x: np.ndarray, seed_index: int = 0) -> np.ndarray:
        return np.interp(x, self.x_values, self.values[seed_index, t_index])


def build_u_map(driver: DriverSpec, model: ForwardModel, grid: TimeGrid, marks: MarkMeasureSpec,
                basis: RegressionBasis, t_values: Sequence[float], x_values: Sequence[float],
                n_paths: int, seed: int, config: Optional[SolverConfig] = None,
                seeds: Optional[Sequence[int]] = None) -> UTable:
    """Tabulate u(t, x) = Y_t^{t,x} on a lattice, optionally for several seeds."""
    config = config or SolverConfig()
    seeds = tuple(seeds) if seeds is not None else (seed,)
    t_values = np.asarray(t_values, dtype=float)
    x_values = np.asarray(x_values, dtype=float)
    shape = (len(seeds), t_values.size, x_values.size)
    values = np.full(shape, np.nan)
    se = np.full(shape, np.nan)
    valid = np.zeros(shape, dtype=bool)
    errors = {}
    cell_cfg = config
    if driver.xi_sup is not None and config.check_structure:
        probes = make_probes(driver, grid, n=256, seed=12345, d=model.d, n_state=model.n)
        rep = check_structure_condition(driver, probes, grid)
        if not rep["passed"]:
            raise StructureViolationError(f"{driver.name}: structure condition fails")
        cell_cfg = dataclasses.replace(config, check_structure=False)
    for s, sd in enumerate(seeds):
        for a, t in enumerate(t_values):
            for b, x in enumerate(x_values):
                try:
                    bundle = simulate_paths(model, grid, marks, (float(t), float(x)), n_paths, sd)
                    sol = solve(bundle, driver, cell_cfg, basis)
                    values[s, a, b] = sol.Y[bundle.start_index].mean()
                    se[s, a, b] = sol.start_se(bundle)
                    valid[s, a, b] = True
                except (NonConvergenceError, WindowSelectionError, DriverEvaluationError, ValueError) as exc:
                    errors[(s, a, b)] = str(exc)
    return UTable(t_values, x_values, seeds, values, se, valid, errors)


def markov_consistency(solution: DiscreteSolution, bundle: PathBundle, table: UTable) -> dict:
    """RMS of Y_s - u(s, X_s) at table times that lie on the grid (scalar state)."""
    rows = []
    for a, t in enumerate(table.t_values):
        i = bundle.grid.index_of(t)
        if abs(bundle.grid.times[i] - t) > 1e-9 or i < bundle.start_index:
            continue
        x = bundle.X[i, :, 0]
        inside = (x >= table.x_values[0]) & (x <= table.x_values[-1])
        if not np.any(inside):
            continue
        diff = solution.Y[i, inside] - table.interpolate(a, x[inside])
        rows.append((float(t), float(np.sqrt(np.mean(diff**2)))))
    return {"rows": rows, "max_rms": max((r[1] for r in rows), default=0.0)}
