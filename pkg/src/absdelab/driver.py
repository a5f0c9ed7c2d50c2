"""Anticipated drivers, quadratic-exponential structure data and their validators."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .forward import MarkMeasureSpec, TimeGrid
from . import kernels

_EXP_MAX = 700.0


class UnsupportedCheckError(ValueError):
    pass


@dataclass(frozen=True)
class StructureParams:
    l_bar: float = 0.0
    delta: float = 0.0
    beta: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.delta < 0 or self.beta < 0:
            raise ValueError("delta and beta must be nonnegative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not np.isfinite(self.l_bar) or self.l_bar < 0:
            raise ValueError("l_bar must be finite and nonnegative")


@dataclass(frozen=True)
class BoundParamsA:
    xi_sup: float
    l_bar: float
    delta: float
    beta: float
    gamma: float
    T: float

    def __post_init__(self):
        vals = (self.xi_sup, self.l_bar, self.delta, self.beta, self.gamma, self.T)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("bound parameters must be finite")
        if self.xi_sup < 0:
            raise ValueError("xi_sup must be nonnegative")


def j_gamma(gamma: float, u):
    """(exp(gamma u) - 1 - gamma u) / gamma, elementwise."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    gu = gamma * np.asarray(u, dtype=float)
    if np.any(gu > _EXP_MAX):
        raise OverflowError("j_gamma argument exceeds the floating range")
    small = np.abs(gu) < 1e-5
    # series branch avoids cancellation near 0
    out = np.where(small, gu * gu / 2 + gu**3 / 6 + gu**4 / 24, np.expm1(np.where(small, 0.0, gu)) - gu) / gamma
    return out if out.ndim else float(out)


def truncate_value(m: float, x):
    """Clamp to [-m, m]."""
    if not m > 0:
        raise ValueError("m must be positive")
    return np.clip(x, -m, m)


@dataclass(frozen=True)
class AnticipatedFunctional:
    """Functional of the future path of Y.

    kind is one of 'none', 'running_sup_abs', 'deferred_value', 'path_integral',
    'custom'. For 'custom', ``func(future, times) -> (P,)`` receives the future
    values Y[i:] with shape (N+1-i, P) and the matching node times.
    """

    kind: str = "none"
    theta: float = 0.0
    func: Optional[Callable] = None
    lipschitz: float = 1.0

    KINDS = ("none", "running_sup_abs", "deferred_value", "path_integral", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom functional needs func")
        if self.kind == "deferred_value" and self.theta < 0:
            raise ValueError("theta must be nonnegative")

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def running_sup_abs(cls):
        return cls("running_sup_abs")

    @classmethod
    def deferred_value(cls, theta: float):
        return cls("deferred_value", theta=float(theta))

    @classmethod
    def path_integral(cls):
        return cls("path_integral", lipschitz=np.inf)

    @property
    def active(self) -> bool:
        return self.kind != "none"


def anticipated_raw(Y: np.ndarray, functional: AnticipatedFunctional, grid: TimeGrid,
                    clamp: Optional[float] = None, lo: int = 0) -> np.ndarray:
    """Pathwise functional value of the future of Y at every node i >= lo.

    Y has shape (N+1, P); the result has the same shape (rows < lo are zero).
    ``clamp`` applies the truncation to the path before the functional.
    """
    if clamp is not None:
        Y = truncate_value(clamp, Y)
    out = np.zeros_like(Y, dtype=float)
    kind = functional.kind
    if kind == "none":
        return out
    t = grid.times
    N = grid.N
    if kind == "running_sup_abs":
        out[lo:] = kernels.suffix_max_abs(Y[lo:])
    elif kind == "deferred_value":
        for i in range(lo, N + 1):
            j = min(N, int(np.searchsorted(t, t[i] + functional.theta - 1e-12, side="left")))
            out[i] = Y[j]
    elif kind == "path_integral":
        seg = 0.5 * (Y[1:] + Y[:-1]) * grid.dt[:, None]
        tail = np.cumsum(seg[::-1], axis=0)[::-1]
        out[lo:N] = tail[lo:]
    else:
        for i in range(lo, N + 1):
            out[i] = functional.func(Y[i:], t[i:])
    return out


def _zero_kernel_lipschitz(M):
    return 0.0


@dataclass(frozen=True)
class DriverSpec:
    """Anticipated driver f(t, x, a, y, z, psi) with terminal condition xi(x).

    Arrays are vectorised over paths: x (P, n), a (P,), y (P,), z (P, d),
    psi (P, Q) at the quadrature marks of ``marks``. ``xi_sup`` is None for an
    unbounded terminal condition. ``path_clamp`` is set by
    :func:`regularize_driver` and truncates the Y path before the functional.
    """

    f: Callable
    xi: Callable
    params: StructureParams
    marks: MarkMeasureSpec = field(default_factory=MarkMeasureSpec.empty)
    functional: AnticipatedFunctional = field(default_factory=AnticipatedFunctional.none)
    xi_sup: Optional[float] = None
    lipschitz: Callable = _zero_kernel_lipschitz
    globally_lipschitz: bool = False
    monotone_in_q: bool = False
    gamma_kernel: Optional[Callable] = None
    kernel_bounds: tuple = (0.0, 0.0)
    xi_holder: tuple = (0.0, 1.0)
    rho: float = 0.0
    path_clamp: Optional[float] = None
    name: str = "driver"

    def __post_init__(self):
        c1, c2 = self.kernel_bounds
        if self.gamma_kernel is not None and not (c1 > -1 and c2 >= 0):
            raise ValueError("A_Gamma bounds need C1 > -1 and C2 >= 0")

    def evaluate(self, t, x, a, y, z, psi):
        return np.asarray(self.f(t, x, a, y, z, psi), dtype=float)

    def bound_params(self, T: float) -> BoundParamsA:
        if self.xi_sup is None:
            raise ValueError(f"{self.name}: terminal condition is not bounded")
        p = self.params
        return BoundParamsA(self.xi_sup, p.l_bar, p.delta, p.beta, p.gamma, T)


def regularize_driver(spec: DriverSpec, m: float) -> DriverSpec:
    """f_m: clamp every argument at level m and drop marks with |e| < 1/m.

    The returned driver is globally Lipschitz and bounded; structure
    parameters are inherited unchanged.
    """
    if not m > 0:
        raise ValueError("m must be positive")
    cut = (np.abs(spec.marks.e) >= 1.0 / m).astype(float) if np.isfinite(m) else np.ones(spec.marks.Q)
    f = spec.f

    def f_m(t, x, a, y, z, psi):
        return f(t, x, a, np.clip(y, -m, m), np.clip(z, -m, m), np.clip(psi * cut, -m, m))

    return dataclasses.replace(
        spec,
        f=f_m,
        globally_lipschitz=True,
        path_clamp=m if spec.path_clamp is None else min(m, spec.path_clamp),
        name=f"{spec.name}[m={m:g}]",
    )


@dataclass
class Probes:
    """Driver argument samples; q holds a future path per probe on grid nodes from index i."""

    i: np.ndarray
    x: np.ndarray
    q: np.ndarray
    y: np.ndarray
    z: np.ndarray
    psi: np.ndarray


def make_probes(spec: DriverSpec, grid: TimeGrid, n: int = 512, scale: float = 3.0,
                seed: int = 0, n_state: int = 1, d: int = 1) -> Probes:
    rng = np.random.default_rng(seed)
    return Probes(
        i=rng.integers(0, grid.N + 1, n),
        x=rng.uniform(-scale, scale, (n, n_state)),
        q=rng.uniform(-scale, scale, (grid.N + 1, n)),
        y=rng.uniform(-scale, scale, n),
        z=rng.uniform(-scale, scale, (n, d)),
        psi=rng.uniform(-scale, scale, (n, spec.marks.Q)),
    )


def _probe_functional(spec: DriverSpec, probes: Probes, grid: TimeGrid):
    """Functional value and sup|q| on [t, T] for every probe."""
    raw = anticipated_raw(probes.q, spec.functional, grid, clamp=spec.path_clamp)
    q = probes.q if spec.path_clamp is None else truncate_value(spec.path_clamp, probes.q)
    supq = kernels.suffix_max_abs(q)
    idx = np.arange(probes.i.size)
    return raw[probes.i, idx], supq[probes.i, idx]


def check_structure_condition(spec: DriverSpec, probes: Probes, grid: TimeGrid, rtol: float = 1e-12) -> dict:
    """Two-sided quadratic-exponential envelope at every probe."""
    p = spec.params
    a, supq = _probe_functional(spec, probes, grid)
    t = grid.times[probes.i]
    fv = np.array([
        spec.evaluate(t[j], probes.x[j : j + 1], a[j : j + 1], probes.y[j : j + 1], probes.z[j : j + 1], probes.psi[j : j + 1])[0]
        for j in range(t.size)
    ])
    w = spec.marks.w
    base = p.l_bar + p.delta * supq + p.beta * np.abs(probes.y) + 0.5 * p.gamma * np.sum(probes.z**2, axis=1)
    if spec.marks.Q:
        up = base + j_gamma(p.gamma, probes.psi) @ w
        low = -base - j_gamma(p.gamma, -probes.psi) @ w
    else:
        up, low = base, -base
    slack = np.minimum(up - fv, fv - low)
    tol = rtol * (1 + np.abs(up) + np.abs(low))
    worst = int(np.argmin(slack + tol))
    ok = bool(np.all(slack >= -tol))
    return {
        "passed": ok,
        "worst_slack": float(slack[worst]),
        "violating_probe": None if ok else {
            "t": float(t[worst]), "y": float(probes.y[worst]), "z": probes.z[worst].tolist(),
            "f": float(fv[worst]), "upper": float(up[worst]), "lower": float(low[worst]),
        },
    }


def check_A_gamma(spec: DriverSpec, probes: Probes, grid: TimeGrid, M: float = 1.0,
                  seed: int = 1, rtol: float = 1e-12) -> dict:
    """One-sided linearisation in psi with a kernel bounded by C1(1^|e|), C2(1^|e|).

    ``spec.gamma_kernel(t, x, a, y, z, psi, psi_prime) -> (P, Q)``. psi and
    psi' are redrawn in [-M, M] and q, y are clamped to M.
    """
    if spec.gamma_kernel is None:
        raise UnsupportedCheckError(f"{spec.name}: no A_Gamma kernel supplied")
    rng = np.random.default_rng(seed)
    n = probes.i.size
    Q = spec.marks.Q
    psi = rng.uniform(-M, M, (n, Q))
    psip = rng.uniform(-M, M, (n, Q))
    q = truncate_value(M, probes.q)
    pr = Probes(probes.i, probes.x, q, truncate_value(M, probes.y), probes.z, psi)
    a, _ = _probe_functional(spec, pr, grid)
    t = grid.times[pr.i]
    w = spec.marks.w
    eta = np.minimum(1.0, np.abs(spec.marks.e))
    c1, c2 = spec.kernel_bounds
    worst_lin, worst_bound = np.inf, np.inf
    for j in range(n):
        args = (pr.x[j : j + 1], a[j : j + 1], pr.y[j : j + 1], pr.z[j : j + 1])
        f1 = spec.evaluate(t[j], *args, psi[j : j + 1])[0]
        f2 = spec.evaluate(t[j], *args, psip[j : j + 1])[0]
        G = np.asarray(spec.gamma_kernel(t[j], *args, psi[j : j + 1], psip[j : j + 1]), dtype=float).reshape(Q)
        rhs = float(np.sum(w * G * (psi[j] - psip[j])))
        tol = rtol * (1 + abs(f1) + abs(f2) + abs(rhs))
        worst_lin = min(worst_lin, rhs - (f1 - f2) + tol)
        worst_bound = min(worst_bound, float(np.min(G - c1 * eta)), float(np.min(c2 * eta - G)))
    bt = rtol * (1 + abs(c1) + abs(c2))
    return {
        "passed": bool(worst_lin >= 0 and worst_bound >= -bt),
        "worst_linearisation_slack": float(worst_lin),
        "worst_kernel_bound_slack": float(worst_bound),
    }
