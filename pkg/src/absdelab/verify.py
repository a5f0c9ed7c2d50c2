"""Checks of solver output against the universal bounds, stability, comparison and regularity laws."""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .bounds import universal_bound_Y, universal_bound_Z_psi
from .condexp import RegressionBasis
from .driver import BoundParamsA, DriverSpec, Probes, anticipated_raw, make_probes
from .forward import PathBundle
from .norms import NormReport
from .solver import CascadeReport, DiscreteSolution, SolverConfig, UTable, solve

__all__ = [
    "BoundEvaluation", "universal_bound_Y", "universal_bound_Z_psi", "check_universal_bounds",
    "perturb_driver", "stability_experiment", "comparison_experiment", "ComparisonPreconditionError",
    "u_regularity_check", "z_growth_check", "m_convergence_check", "picard_geometric_check",
    "entropic_oracle", "u_seed_spread", "uniqueness_proxy",
]


class ComparisonPreconditionError(ValueError):
    pass


@dataclass
class BoundEvaluation:
    name: str
    rhs: float
    lhs: float
    tolerance: float = 0.0

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.slack >= -self.tolerance


def check_universal_bounds(solution: DiscreteSolution, report: NormReport, A: BoundParamsA,
                           tolerance: Optional[float] = None) -> list[BoundEvaluation]:
    """Empirical S_inf, H2_BMO and J2_BMO against the closed-form bounds.

    The default tolerance is the Picard tolerance the solution was computed to.
    """
    if tolerance is None:
        tolerance = solution.eps_fix or 0.0
    y_bound = universal_bound_Y(A)
    z2, psi2 = universal_bound_Z_psi(A, report.S_inf)
    return [
        BoundEvaluation("Y_sup", y_bound, report.S_inf, tolerance),
        BoundEvaluation("Z_bmo", z2, report.H2_BMO, tolerance),
        BoundEvaluation("psi_bmo", psi2, report.J2_BMO, tolerance),
    ]


def entropic_oracle(bundle: PathBundle, xi: Callable, gamma: float) -> tuple[float, float]:
    """(1/gamma) log of the sample mean of exp(gamma xi), with a delta-method standard error."""
    v = np.exp(gamma * np.asarray(xi(bundle.X[-1]), dtype=float))
    m = float(v.mean())
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(np.log(m) / gamma), se / (gamma * m)


def perturb_driver(spec: DriverSpec, eps: float, eta: Optional[Callable] = None, g: Optional[Callable] = None,
                   eta_sup: float = 0.0, g_sup: float = 0.0) -> DriverSpec:
    """(xi + eps*eta, f + eps*g); eta(x) and g(t, x, a, y, z, psi) must be bounded by the given sups."""
    if eps == 0.0:
        return spec
    f, xi = spec.f, spec.xi
    new_f = f if g is None else (lambda t, x, a, y, z, psi: f(t, x, a, y, z, psi) + eps * g(t, x, a, y, z, psi))
    new_xi = xi if eta is None else (lambda x: xi(x) + eps * eta(x))
    params = dataclasses.replace(spec.params, l_bar=spec.params.l_bar + abs(eps) * g_sup)
    xi_sup = None if spec.xi_sup is None else spec.xi_sup + abs(eps) * eta_sup
    return dataclasses.replace(spec, f=new_f, xi=new_xi, params=params, xi_sup=xi_sup,
                               name=f"{spec.name}+{eps:g}")


def _sp_norm(dY, p):
    return float(np.mean(np.max(np.abs(dY), axis=0) ** p) ** (1.0 / p))


def stability_experiment(bundle: PathBundle, driver: DriverSpec, eps_grid: Sequence[float],
                         config: SolverConfig, basis: RegressionBasis, eta: Optional[Callable] = None,
                         g: Optional[Callable] = None, eta_sup: float = 0.0, g_sup: float = 0.0,
                         p: float = 2.0, slope_band: tuple = (0.85, 1.15),
                         solver: Callable = solve) -> dict:
    """||Y(eps) - Y(0)||_{S^p} over an eps grid and its fitted log-log slope."""
    if len([e for e in eps_grid if e > 0]) < 3:
        raise ValueError("need at least three positive eps values")
    base = solver(bundle, driver, config, basis)
    s0 = bundle.start_index
    rows = []
    for e in eps_grid:
        sol = solver(bundle, perturb_driver(driver, e, eta, g, eta_sup, g_sup), config, basis)
        dY = sol.Y[s0:] - base.Y[s0:]
        rows.append((float(e), _sp_norm(dY, p), float(np.max(np.abs(dY)))))
    pos = [(e, n) for e, n, _ in rows if e > 0 and n > 0]
    slope = float(np.polyfit(np.log([r[0] for r in pos]), np.log([r[1] for r in pos]), 1)[0]) if len(pos) >= 2 else float("nan")
    zero_exact = all(n == 0.0 for e, n, _ in rows if e == 0)
    return {
        "rows": rows, "slope": slope, "zero_exact": zero_exact,
        "passed": bool(slope_band[0] <= slope <= slope_band[1] and zero_exact),
    }


def _probe_eval(spec: DriverSpec, probes: Probes, bundle: PathBundle):
    grid = bundle.grid
    raw = anticipated_raw(probes.q, spec.functional, grid, clamp=spec.path_clamp)
    a = raw[probes.i, np.arange(probes.i.size)]
    t = grid.times[probes.i]
    return np.array([
        spec.evaluate(t[j], probes.x[j : j + 1], a[j : j + 1], probes.y[j : j + 1], probes.z[j : j + 1],
                      probes.psi[j : j + 1])[0]
        for j in range(t.size)
    ])


def comparison_experiment(bundle: PathBundle, lower: DriverSpec, upper: DriverSpec, config: SolverConfig,
                          basis: RegressionBasis, noise_floor: Optional[float] = None,
                          probes: Optional[Probes] = None, solver: Callable = solve) -> dict:
    """Solve both drivers on the same bundle and report max (Y1 - Y2)_+."""
    probes = probes or make_probes(lower, bundle.grid, n=256, seed=7, d=bundle.model.d, n_state=bundle.model.n)
    xs = np.concatenate([probes.x, bundle.X[-1, : min(bundle.P, 1024)]])
    if np.any(lower.xi(xs) > upper.xi(xs)):
        raise ComparisonPreconditionError("terminal conditions are not ordered on the probes")
    if np.any(_probe_eval(lower, probes, bundle) > _probe_eval(upper, probes, bundle)):
        raise ComparisonPreconditionError("drivers are not ordered on the probes")
    if upper.functional.active and not upper.monotone_in_q:
        raise ComparisonPreconditionError("upper anticipated driver must be monotone in q")
    s1 = solver(bundle, lower, config, basis)
    s2 = solver(bundle, upper, config, basis)
    s0 = bundle.start_index
    diff = s1.Y[s0:] - s2.Y[s0:]
    violation = float(np.max(np.maximum(diff, 0.0)))
    scale = max(float(np.max(np.abs(s1.Y[s0:]))), float(np.max(np.abs(s2.Y[s0:]))))
    floor = 1e-3 * scale if noise_floor is None else noise_floor
    return {
        "violation": violation, "noise_floor": floor, "identical": bool(np.array_equal(s1.Y, s2.Y)),
        "Y0": (s1.Y0, s2.Y0), "passed": bool(violation <= floor),
    }


def u_regularity_check(table: UTable, rho: float = 0.0, alpha: float = 1.0, ratio_limit: float = 10.0,
                       seed_index: int = 0) -> dict:
    """Normalised space increments over adjacent lattice pairs and a fitted time-Holder exponent."""
    u = table.values[seed_index]
    ok = table.valid[seed_index]
    x, t = table.x_values, table.t_values
    ratios, skipped = [], 0
    for a in range(t.size):
        for b in range(x.size - 1):
            if not (ok[a, b] and ok[a, b + 1]):
                skipped += 1
                continue
            den = (1 + max(abs(x[b]), abs(x[b + 1])) ** rho) * abs(x[b + 1] - x[b]) ** alpha
            ratios.append(abs(u[a, b + 1] - u[a, b]) / den)
    ratios = np.asarray(ratios)
    rmax = float(ratios.max()) if ratios.size else 0.0
    rmed = float(np.median(ratios)) if ratios.size else 0.0
    spread = rmax / rmed if rmed > 0 else (0.0 if rmax == 0 else np.inf)
    gaps, incs = [], []
    for k in range(1, t.size):
        vals = []
        for a in range(t.size - k):
            m = ok[a] & ok[a + k]
            vals.extend(np.abs(u[a + k, m] - u[a, m]).tolist())
        if vals and np.mean(vals) > 0:
            gaps.append(float(np.mean(np.abs(t[k:] - t[:-k]))))
            incs.append(float(np.mean(vals)))
    if len(gaps) >= 2:
        exponent = float(np.polyfit(np.log(gaps), np.log(incs), 1)[0])
    else:
        exponent = float("inf")  # no time variation at all
    return {
        "space_ratio_max": rmax, "space_ratio_median": rmed, "space_ratio_spread": float(spread),
        "time_exponent": exponent, "skipped": skipped,
        "passed": bool(spread <= ratio_limit and exponent > 0),
    }


def u_seed_spread(table: UTable, n_se: float = 3.0) -> dict:
    """Cellwise |u_seed1 - u_seed2| against n_se combined standard errors."""
    if table.values.shape[0] < 2:
        raise ValueError("table needs two seeds")
    d = np.abs(table.values[0] - table.values[1])
    se = np.sqrt(table.se[0] ** 2 + table.se[1] ** 2)
    ok = table.valid[0] & table.valid[1]
    exact = (d == 0)
    within = exact | (d <= n_se * se)
    worst = float(np.max(np.where(ok & (se > 0), d / np.where(se > 0, se, 1.0), 0.0)))
    return {"cells": int(ok.sum()), "failures": int((ok & ~within).sum()), "worst_z": worst,
            "passed": bool(np.all(within[ok]))}


def _tail_stat(ratio):
    r = ratio.ravel()
    med = float(np.median(r))
    q999 = float(np.quantile(r, 0.999))
    if q999 == 0.0:
        return 0.0, med, q999, True
    return float(r.max()), med, q999, bool(q999 <= 2.0 * med)


def z_growth_check(solution: DiscreteSolution, bundle: PathBundle, rho: float = 0.0) -> dict:
    """|Z| / (1 + |X|^{1+rho}) and ||psi||_{L2(nu)} / (1 + |X_-|^{1+rho}): no tail blow-up."""
    s0, N = bundle.start_index, bundle.grid.N
    xn = np.linalg.norm(bundle.X[s0:N], axis=2)
    den = 1.0 + xn ** (1.0 + rho)
    zr = np.linalg.norm(solution.Z[s0:N], axis=2) / den
    w = bundle.marks.w
    pn = np.sqrt((solution.psi[s0:N] ** 2) @ w) if w.size else np.zeros_like(zr)
    pr = pn / den
    cz, mz, qz, okz = _tail_stat(zr)
    cp, mp, qp, okp = _tail_stat(pr)
    return {
        "Z_constant": cz, "Z_median": mz, "Z_q999": qz,
        "psi_constant": cp, "psi_median": mp, "psi_q999": qp,
        "passed": bool(okz and okp),
    }


def m_convergence_check(cascade: CascadeReport, eps_fix: Optional[float] = None) -> dict:
    """Successive level distances nonincreasing, the last one below eps_fix."""
    eps = cascade.eps_fix if eps_fix is None else eps_fix
    d = list(cascade.distances)
    if len(cascade.levels) < 2:
        warnings.warn("single-level cascade: convergence check is vacuous", stacklevel=2)
        return {"distances": d, "passed": True, "vacuous": True}
    if len(cascade.levels) < 3:
        warnings.warn("fewer than three cascade levels", stacklevel=2)
    mono = all(b <= a * (1 + 1e-12) + 1e-15 for a, b in zip(d, d[1:]))
    return {"distances": d, "last": d[-1], "eps_fix": eps, "nonincreasing": mono,
            "passed": bool(mono and d[-1] < eps), "vacuous": False}


def picard_geometric_check(trace: Sequence[float], eps_fix: float, ratio_limit: float = 0.9) -> dict:
    """The trace reaches eps_fix and its last nonzero successive ratio is below ratio_limit."""
    tr = [float(v) for v in trace]
    ratios = [b / a for a, b in zip(tr, tr[1:]) if a > 0]
    last = ratios[-1] if ratios else 0.0
    return {"trace": tr, "last_ratio": last,
            "passed": bool(tr and tr[-1] < eps_fix and last <= ratio_limit)}


def uniqueness_proxy(bundle: PathBundle, driver: DriverSpec, config: SolverConfig, basis: RegressionBasis) -> dict:
    """Picard started at zero and at the universal Y bound must agree within eps_fix."""
    from .solver import _finalize, _fresh_solution, _sweep_range, resolve_eps  # noqa: PLC0415

    eps = resolve_eps(config, driver, bundle)
    level = universal_bound_Y(driver.bound_params(bundle.grid.T))
    sol0 = solve(bundle, driver, config, basis)
    sol1 = _fresh_solution(bundle, driver)
    lo, hi = bundle.start_index, bundle.grid.N
    sol1.Y[lo:hi] = level
    prev = sol1.Y.copy()
    for _ in range(config.max_iter):
        _sweep_range(bundle, driver, prev, sol1, basis, lo, hi)
        if np.max(np.abs(sol1.Y[lo:hi] - prev[lo:hi])) < eps:
            break
        prev[lo:hi] = sol1.Y[lo:hi]
    _finalize(sol1)
    gap = float(np.max(np.abs(sol0.Y[lo:] - sol1.Y[lo:])))
    return {"gap": gap, "eps_fix": eps, "passed": bool(gap < eps)}
