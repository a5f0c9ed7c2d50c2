"""Built-in scenarios addressable by name from a run configuration."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .driver import AnticipatedFunctional, DriverSpec, StructureParams, j_gamma
from .forward import ForwardModel, MarkMeasureSpec, TimeGrid


@dataclass
class Scenario:
    name: str
    model: ForwardModel
    marks: MarkMeasureSpec
    grid: TimeGrid
    x0: float
    driver: DriverSpec
    params: dict
    partner: Optional[DriverSpec] = None
    default_checks: tuple = ()
    oracle: Optional[Callable] = field(default=None, repr=False)


# name -> (what it exercises, default checks)
CATALOGUE = {
    "zero": (
        "trivial data; every solver path and check must be exact",
        ("closed_form", "universal_bounds", "jump_norm_lemmas", "picard_geometric"),
    ),
    "entropic": (
        "universal Y/Z/psi bounds and the truncation cascade, checked against the entropic closed form",
        ("structure_condition", "cole_hopf", "universal_bounds", "jump_norm_lemmas", "m_convergence", "energy"),
    ),
    "linear_y": (
        "Picard contraction for a Lipschitz driver, exponential closed form",
        ("closed_form", "picard_geometric", "universal_bounds"),
    ),
    "anticipated_sup": (
        "anticipated running-sup driver; windowed fixed point against its ODE closed form",
        ("closed_form", "picard_geometric", "universal_bounds"),
    ),
    "deferred_value": (
        "deferred-value functional Y_{(r+theta)^T}; piecewise ODE closed form",
        ("closed_form", "picard_geometric"),
    ),
    "comparison_pair": (
        "comparison principle for anticipated and non-anticipated drivers on shared paths",
        ("comparison",),
    ),
    "brownian_identity": (
        "Z-extraction and Z growth regularity with Z = 1 exactly",
        ("z_growth", "doleans", "energy"),
    ),
}

DEFAULTS = {
    "model": {"drift": 0.0, "sigma": 1.0, "x0": 0.0, "jump_intensity": 0.0, "jump_marks": [-0.5, 0.5]},
    "grid": {"T": 1.0, "N": 100},
    "driver": {
        "zero": {"xi_constant": 0.0, "gamma": 1.0},
        "entropic": {"gamma": 1.0, "xi_amplitude": 1.0, "kernel_M": 1.0},
        "linear_y": {"coefficient": 1.0, "xi_constant": 1.0, "gamma": 1.0},
        "anticipated_sup": {"delta": 0.5, "xi_constant": 1.0, "gamma": 1.0},
        "deferred_value": {"theta": 0.5, "xi_constant": 1.0, "gamma": 1.0},
        "comparison_pair": {"delta": 0.5, "shift": 0.5, "xi_amplitude": 1.0, "gamma": 1.0},
        "brownian_identity": {"gamma": 1.0},
    },
}


def list_scenarios() -> list[tuple[str, str]]:
    return [(name, desc) for name, (desc, _) in CATALOGUE.items()]


def make_marks(intensity: float, marks) -> MarkMeasureSpec:
    if intensity <= 0:
        return MarkMeasureSpec.empty()
    e = np.asarray(marks, dtype=float)
    return MarkMeasureSpec.atoms((e, np.full(e.size, intensity / e.size)))


def _const_xi(c):
    return lambda x: np.full(x.shape[0], float(c))


def entropic_driver(gamma: float, marks: MarkMeasureSpec, xi: Callable, xi_sup: float,
                    kernel_M: float = 1.0) -> DriverSpec:
    """f = (gamma/2)|z|^2 + sum_q w_q j_gamma(psi_q)."""
    w = marks.w

    def f(t, x, a, y, z, psi):
        out = 0.5 * gamma * np.sum(z**2, axis=1)
        if w.size:
            out = out + j_gamma(gamma, psi) @ w
        return out

    kernel, bounds = None, (0.0, 0.0)
    if w.size:
        eta_min = float(np.min(np.minimum(1.0, np.abs(marks.e))))
        c1 = (np.exp(-gamma * kernel_M) - 1.0) / eta_min
        c2 = (np.exp(gamma * kernel_M) - 1.0) / eta_min
        if c1 > -1:
            bounds = (float(c1), float(c2))
            kernel = entropic_kernel(gamma)
    return DriverSpec(
        f=f,
        xi=xi,
        params=StructureParams(0.0, 0.0, 0.0, gamma),
        marks=marks,
        xi_sup=xi_sup,
        lipschitz=lambda M: gamma * (1 + 2 * M) + np.exp(gamma * M),
        gamma_kernel=kernel,
        kernel_bounds=bounds,
        xi_holder=(1.0, 1.0),
        rho=0.0,
        name="entropic",
    )


def entropic_kernel(gamma: float):
    """Mean-value slope of j_gamma between psi' and psi, per mark."""

    def kernel(t, x, a, y, z, psi, psip):
        d = psi - psip
        safe = np.where(d == 0, 1.0, d)
        slope = (j_gamma(gamma, psi) - j_gamma(gamma, psip)) / safe
        return np.where(d == 0, np.expm1(gamma * psi), slope)

    return kernel


def build(name: str, params: Optional[dict] = None) -> Scenario:
    """Construct a scenario from (partially specified) parameters; missing ones take defaults."""
    if name not in CATALOGUE:
        raise KeyError(f"unknown scenario {name!r}")
    params = params or {}
    mp = {**DEFAULTS["model"], **params.get("model", {})}
    gp = {**DEFAULTS["grid"], **params.get("grid", {})}
    dp = {**DEFAULTS["driver"][name], **params.get("driver", {})}
    grid = TimeGrid.uniform(float(gp["T"]), int(gp["N"]))
    marks = make_marks(float(mp["jump_intensity"]), mp["jump_marks"])
    model = ForwardModel.constant(mp["drift"], mp["sigma"], jump_scale=1.0 if marks.k else 0.0)
    T = grid.T
    resolved = {"model": mp, "grid": gp, "driver": dp}
    partner = None
    oracle = None
    gamma = float(dp.get("gamma", 1.0))

    if name == "zero":
        c = float(dp["xi_constant"])
        driver = DriverSpec(
            f=lambda t, x, a, y, z, psi: np.zeros(x.shape[0]),
            xi=_const_xi(c), params=StructureParams(gamma=gamma), marks=marks, xi_sup=abs(c),
            globally_lipschitz=True, monotone_in_q=True, name="zero",
        )
        oracle = lambda t: c  # noqa: E731
    elif name == "entropic":
        amp = float(dp["xi_amplitude"])
        driver = entropic_driver(gamma, marks, lambda x: amp * np.sin(x[:, 0]), abs(amp), float(dp["kernel_M"]))
    elif name == "linear_y":
        k, c = float(dp["coefficient"]), float(dp["xi_constant"])
        driver = DriverSpec(
            f=lambda t, x, a, y, z, psi: k * y,
            xi=_const_xi(c), params=StructureParams(beta=abs(k), gamma=gamma), marks=marks, xi_sup=abs(c),
            lipschitz=lambda M: abs(k), globally_lipschitz=True, name="linear_y",
        )
        oracle = lambda t: c * np.exp(k * (T - t))  # noqa: E731
    elif name == "anticipated_sup":
        delta, c = float(dp["delta"]), float(dp["xi_constant"])
        driver = DriverSpec(
            f=lambda t, x, a, y, z, psi: delta * a,
            xi=_const_xi(c), params=StructureParams(delta=delta, gamma=gamma), marks=marks, xi_sup=abs(c),
            functional=AnticipatedFunctional.running_sup_abs(), lipschitz=lambda M: delta,
            globally_lipschitz=True, monotone_in_q=True, name="anticipated_sup",
        )
        oracle = lambda t: abs(c) * np.exp(delta * (T - t)) if c >= 0 else None  # noqa: E731
    elif name == "deferred_value":
        theta, c = float(dp["theta"]), float(dp["xi_constant"])
        driver = DriverSpec(
            f=lambda t, x, a, y, z, psi: a,
            xi=_const_xi(c), params=StructureParams(delta=1.0, gamma=gamma), marks=marks, xi_sup=abs(c),
            functional=AnticipatedFunctional.deferred_value(theta), lipschitz=lambda M: 1.0,
            globally_lipschitz=True, name="deferred_value",
        )
        oracle = lambda t: deferred_value_oracle(t, T, theta, c)  # noqa: E731
    elif name == "comparison_pair":
        delta, shift, amp = float(dp["delta"]), float(dp["shift"]), float(dp["xi_amplitude"])
        xi = lambda x: amp * np.sin(x[:, 0])  # noqa: E731
        driver = DriverSpec(
            f=lambda t, x, a, y, z, psi: delta * a,
            xi=xi, params=StructureParams(delta=delta, gamma=gamma), marks=marks, xi_sup=abs(amp),
            functional=AnticipatedFunctional.running_sup_abs(), lipschitz=lambda M: delta,
            globally_lipschitz=True, monotone_in_q=True, name="comparison_lower",
        )
        partner = DriverSpec(
            f=lambda t, x, a, y, z, psi: delta * a + shift,
            xi=xi, params=StructureParams(l_bar=abs(shift), delta=delta, gamma=gamma), marks=marks,
            xi_sup=abs(amp), functional=AnticipatedFunctional.running_sup_abs(), lipschitz=lambda M: delta,
            globally_lipschitz=True, monotone_in_q=True, name="comparison_upper",
        )
    else:  # brownian_identity
        driver = DriverSpec(
            f=lambda t, x, a, y, z, psi: np.zeros(x.shape[0]),
            xi=lambda x: x[:, 0].copy(), params=StructureParams(gamma=gamma), marks=marks, xi_sup=None,
            globally_lipschitz=True, name="brownian_identity",
        )
    return Scenario(name, model, marks, grid, float(mp["x0"]), driver, resolved, partner,
                    CATALOGUE[name][1], oracle)


def deferred_value_oracle(t: float, T: float, theta: float, c: float, n_steps: int = 20000) -> float:
    """Solve y'(t) = -y((t + theta) ^ T), y(T) = c, backward with a fine explicit grid."""
    if t >= T - theta:
        return c * (1.0 + (T - t))
    h = (T - t) / n_steps
    ts = T - h * np.arange(n_steps + 1)
    ys = np.empty(n_steps + 1)
    ys[0] = c
    for k in range(n_steps):
        lag = min(T, ts[k] + theta)
        if lag >= T:
            a = c
        else:
            a = np.interp(lag, ts[: k + 1][::-1], ys[: k + 1][::-1])
        ys[k + 1] = ys[k] + h * a
    return float(ys[-1])
