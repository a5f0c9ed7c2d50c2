"""Empirical S/H/J norms, grid-sup BMO estimators and martingale moment checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .condexp import Projector, RegressionBasis
from .forward import PathBundle

GRID_SUP_LABEL = "grid-sup (under-)approximation of the stopping-time sup"


@dataclass
class NormReport:
    S_inf: float
    S_p: dict
    H2: float
    H_p: dict
    J2: float
    J_p: dict
    H2_BMO: float
    J2_B: float
    J_inf: float
    J2_BMO: float
    J_inf_grid: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [("S_inf", self.S_inf)]
        out += [(f"S^{p:g}", v) for p, v in self.S_p.items()]
        out += [("H2", self.H2)] + [(f"H^{p:g}", v) for p, v in self.H_p.items()]
        out += [("J2", self.J2)] + [(f"J^{p:g}", v) for p, v in self.J_p.items()]
        out += [("H2_BMO", self.H2_BMO), ("J2_B", self.J2_B), ("J_inf", self.J_inf), ("J2_BMO", self.J2_BMO)]
        return out


def _proj(bundle, i, basis):
    key = ("proj", i, basis.degree, basis.ridge)
    p = bundle.cache.get(key)
    if p is None:
        p = Projector(bundle.X[i], basis)
        bundle.cache[key] = p
    return p


def _tails(inc: np.ndarray) -> np.ndarray:
    """tails[k] = sum_{j >= k} inc[j]; one extra zero row at the end."""
    out = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
    out[:-1] = np.cumsum(inc[::-1], axis=0)[::-1]
    return out


def _grid_sup(tails, bundle, basis, lo):
    """Per-node regression estimate of E[tail | X_i], clipped at 0; returns (N_nodes, P)."""
    est = np.zeros_like(tails)
    for k in range(tails.shape[0] - 1):
        i = lo + k
        if np.all(tails[k] == tails[k, 0]):
            est[k] = tails[k, 0]
        else:
            est[k] = _proj(bundle, i, basis).fit(tails[k]).fitted
    return np.maximum(est, 0.0)


def estimate_norms(solution, bundle: PathBundle, basis: Optional[RegressionBasis] = None,
                   p_list: Sequence[float] = (2.0,), lo: Optional[int] = None,
                   hi: Optional[int] = None) -> NormReport:
    """Norm estimates on nodes [lo, hi] (default: start node to N)."""
    basis = basis or RegressionBasis()
    N = bundle.grid.N
    lo = bundle.start_index if lo is None else max(lo, bundle.start_index)
    hi = N if hi is None else hi
    Y = solution.Y[lo : hi + 1]
    S_inf = float(np.max(np.abs(Y)))
    sup_path = np.max(np.abs(Y), axis=0)
    S_p = {float(p): float(np.mean(sup_path**p) ** (1.0 / p)) for p in p_list}
    dts = np.array([bundle.step_dt(i) for i in range(lo, hi)])
    zinc = np.sum(solution.Z[lo:hi] ** 2, axis=2) * dts[:, None]
    w = bundle.marks.w
    jinc = ((solution.psi[lo:hi] ** 2) @ w if w.size else np.zeros_like(zinc)) * dts[:, None]
    ztail, jtail = _tails(zinc), _tails(jinc)

    def lp(tot, p):
        return float(np.mean(tot ** (p / 2.0)) ** (1.0 / p))

    H_p = {float(p): lp(ztail[0], p) for p in p_list}
    J_p = {float(p): lp(jtail[0], p) for p in p_list}
    zest = _grid_sup(ztail, bundle, basis, lo)
    jest = _grid_sup(jtail, bundle, basis, lo)
    H2_BMO = float(np.max(zest))
    J2_B = float(np.max(jest))

    ev = bundle.events
    sel = (ev.node >= lo) & (ev.node < hi)
    jumps = solution.event_psi[sel]
    meta = {"bmo_estimator": GRID_SUP_LABEL, "nodes": (lo, hi), "n_events": int(sel.sum())}
    if jumps.size:
        J_inf = float(np.max(np.abs(jumps)))
        J2_BMO = max(J2_B, float(np.max(jest[ev.node[sel] - lo, ev.path[sel]] + jumps**2)))
    else:
        J_inf = 0.0
        J2_BMO = J2_B
        meta["empty_jump_set"] = True
    J_inf_grid = None
    q = np.unique(ev.qidx[sel])
    if q.size and np.all(q >= 0):
        J_inf_grid = float(np.max(np.abs(solution.psi[lo:hi][:, :, q])))
    return NormReport(
        S_inf=S_inf, S_p=S_p, H2=H_p.get(2.0, lp(ztail[0], 2)), H_p=H_p,
        J2=J_p.get(2.0, lp(jtail[0], 2)), J_p=J_p, H2_BMO=H2_BMO, J2_B=J2_B,
        J_inf=J_inf, J2_BMO=J2_BMO, J_inf_grid=J_inf_grid, meta=meta,
    )


def check_jump_norm_lemmas(report: NormReport, rtol: float = 1e-12) -> list[dict]:
    """Two-sided chain between J2_B, J_inf and J2_BMO, and the event-sup vs mark-grid sup of J_inf."""
    lower = max(report.J2_B, report.J_inf**2)
    upper = report.J2_B + report.J_inf**2
    tol = rtol * (1 + upper)
    rows = [
        {"check": "jump_chain_lower", "lhs": lower, "rhs": report.J2_BMO, "passed": lower <= report.J2_BMO + tol},
        {"check": "jump_chain_upper", "lhs": report.J2_BMO, "rhs": upper, "passed": report.J2_BMO <= upper + tol},
    ]
    if report.J_inf_grid is not None:
        rows.append({
            "check": "jump_sup_event_vs_marks", "lhs": report.J_inf, "rhs": report.J_inf_grid,
            "passed": report.J_inf <= report.J_inf_grid * (1 + rtol) + rtol,
        })
    return rows


def _kernel_array(Z_kernel, bundle):
    N, P, d = bundle.grid.N, bundle.P, bundle.model.d
    if callable(Z_kernel):
        return np.stack([np.asarray(Z_kernel(bundle.grid.times[i], bundle.X[i]), dtype=float).reshape(P, d)
                         for i in range(N)])
    Z = np.asarray(Z_kernel, dtype=float)
    if Z.ndim == 0:
        return np.full((N, P, d), float(Z))
    return np.broadcast_to(Z[:N], (N, P, d))


def doleans_check(Z_kernel, bundle: PathBundle, n_se: float = 3.0) -> dict:
    """Discrete stochastic exponential of int Z dW; its mean should be 1."""
    Z = _kernel_array(Z_kernel, bundle)
    dts = np.array([bundle.step_dt(i) for i in range(bundle.grid.N)])
    logE = np.sum(np.sum(Z * bundle.dW, axis=2) - 0.5 * np.sum(Z**2, axis=2) * dts[:, None], axis=0)
    saturated = logE > 700.0
    E = np.exp(np.minimum(logE, 700.0))
    n = E.size
    mean, se = float(E.mean()), float(E.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    E2 = E**2
    m2, se2 = float(E2.mean()), float(E2.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    passed = abs(mean - 1.0) <= n_se * se if se > 0 else abs(mean - 1.0) <= 1e-12
    return {
        "mean": mean, "se": se, "second_moment": m2, "second_moment_se": se2,
        "saturated": int(saturated.sum()), "passed": bool(passed),
    }


def energy_check(Z, bundle: PathBundle, n: int, h2_bmo: Optional[float] = None,
                 basis: Optional[RegressionBasis] = None, n_se: float = 3.0) -> dict:
    """E[(int |Z|^2 dr)^n] <= n! * ||Z||_{H2_BMO}^{2n}, with Monte Carlo slack."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    Zarr = getattr(Z, "Z", Z)
    Zarr = _kernel_array(Zarr, bundle) if np.ndim(Zarr) < 3 else np.asarray(Zarr)[: bundle.grid.N]
    s0 = bundle.start_index
    dts = np.array([bundle.step_dt(i) for i in range(bundle.grid.N)])
    inc = np.sum(Zarr**2, axis=2) * dts[:, None]
    total = inc[s0:].sum(axis=0)
    if h2_bmo is None:
        tails = _tails(inc[s0:])
        h2_bmo = float(np.max(_grid_sup(tails, bundle, basis or RegressionBasis(), s0)))
    vals = total**n
    lhs = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    rhs = math.factorial(n) * h2_bmo**n
    return {
        "n": n, "lhs": lhs, "lhs_se": se, "rhs": rhs,
        "passed": bool(lhs - n_se * se <= rhs * (1 + 1e-12) + 1e-15),
    }
