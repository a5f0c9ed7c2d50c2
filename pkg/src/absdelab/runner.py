"""Config-driven experiment runs: simulate, solve, estimate norms, run checks, write artifacts."""
from __future__ import annotations

import copy
import io
import json
import math
import platform
import time
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np
import yaml

from . import __version__, kernels, scenarios, verify
from .condexp import RegressionBasis
from .driver import check_structure_condition, make_probes
from .forward import simulate_paths, thread_count
from .norms import check_jump_norm_lemmas, doleans_check, energy_check, estimate_norms
from .solver import (
    NonConvergenceError,
    SolverConfig,
    StructureViolationError,
    WindowSelectionError,
    build_u_map,
    solve,
    solve_qexp_absde,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NONCONV = 0, 1, 2, 3
HEADER = ("check", "lhs", "rhs", "slack", "pass")

RUN_DEFAULTS = {
    "solver": {"schedule": [2.0, 4.0, 8.0, 16.0], "eps_fix": None, "max_iter": 50, "window": None,
               "beta_weight": 0.0, "early_stop": True, "p": 2.0},
    "monte_carlo": {"n_paths": 20000, "seed": 0},
    "basis": {"degree": 5, "ridge": 1e-8, "winsor": 1e-3},
    "check_options": {
        "stability_eps": [0.0, 0.01, 0.02, 0.04], "comparison_floor": None, "energy_orders": [1, 2],
        "u_t_values": [0.0, 0.25, 0.5, 0.75, 1.0], "u_x_values": [-2.0, -1.0, 0.0, 1.0, 2.0],
        "u_paths": 4000, "u_seeds": None, "rho": 0.0, "alpha": 1.0, "n_se": 3.0,
    },
    "output": {"dir": "out", "node_summaries": True},
}


class ConfigError(ValueError):
    pass


@dataclass
class Row:
    check: str
    lhs: float
    rhs: float
    passed: bool
    slack: Optional[float] = None  # defaults to rhs - lhs

    def cells(self):
        s = self.rhs - self.lhs if self.slack is None else self.slack
        return (self.check, _fmt(self.lhs), _fmt(self.rhs), _fmt(s), "true" if self.passed else "false")


def _fmt(v) -> str:
    return "%.17g" % float(v)


def load_schema() -> dict:
    return json.loads(resources.files("absdelab").joinpath("schema.json").read_text())


def _path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def resolve_config(raw: dict) -> dict:
    """Validate against the schema and fill every default; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: config must be a mapping")
    errors = sorted(jsonschema.Draft202012Validator(load_schema()).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))
    name = raw["scenario"]
    allowed = scenarios.DEFAULTS["driver"][name]
    for key in raw.get("driver", {}):
        if key not in allowed:
            raise ConfigError(f"driver.{key}: not a parameter of scenario {name!r} (allowed: {sorted(allowed)})")
    cfg = {"scenario": name}
    cfg["model"] = {**scenarios.DEFAULTS["model"], **raw.get("model", {})}
    cfg["grid"] = {**scenarios.DEFAULTS["grid"], **raw.get("grid", {})}
    cfg["driver"] = {**allowed, **raw.get("driver", {})}
    for block, dflt in RUN_DEFAULTS.items():
        cfg[block] = {**copy.deepcopy(dflt), **raw.get(block, {})}
    cfg["checks"] = list(raw.get("checks", scenarios.CATALOGUE[name][1]))
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: invalid YAML: {exc}") from exc
    return raw


@dataclass
class Context:
    cfg: dict
    scenario: scenarios.Scenario
    bundle: object
    solution: object
    basis: RegressionBasis
    solver_cfg: SolverConfig
    cache: dict = field(default_factory=dict)

    @property
    def opts(self):
        return self.cfg["check_options"]

    def report(self):
        if "report" not in self.cache:
            self.cache["report"] = estimate_norms(self.solution, self.bundle, self.basis)
        return self.cache["report"]

    def u_table(self):
        if "u_table" not in self.cache:
            o, sc = self.opts, self.scenario
            seed = self.cfg["monte_carlo"]["seed"]
            seeds = o["u_seeds"] or [seed, seed + 1]
            self.cache["u_table"] = build_u_map(
                sc.driver, sc.model, sc.grid, sc.marks, self.basis, o["u_t_values"], o["u_x_values"],
                o["u_paths"], seed, self.solver_cfg, seeds=seeds,
            )
        return self.cache["u_table"]


def _rel(value, oracle):
    return abs(value - oracle) / abs(oracle) if oracle != 0 else abs(value - oracle)


def _closed_form(ctx: Context):
    sc, sol, bundle = ctx.scenario, ctx.solution, ctx.bundle
    if sc.name == "entropic":
        return _cole_hopf(ctx)
    if sc.name == "brownian_identity":
        se = sol.start_se(bundle)
        err = abs(sol.Y0 - float(np.mean(bundle.X[-1, :, 0])))
        return [Row("closed_form_Y0", err, ctx.opts["n_se"] * se + 1e-12, bool(err <= ctx.opts["n_se"] * se + 1e-12))]
    if sc.oracle is None or sc.oracle(bundle.start_t) is None:
        raise ConfigError(f"checks: no closed form for scenario {sc.name!r}")
    tol = 1e-12 if sc.name == "zero" else 0.01
    rows = []
    err = _rel(sol.Y0, sc.oracle(bundle.start_t))
    rows.append(Row("closed_form_Y0", err, tol, err < tol))
    if sc.name == "deferred_value":
        t_mid = sc.grid.T - 0.5 * sc.params["driver"]["theta"]
        i = sc.grid.index_of(t_mid)
        if i >= bundle.start_index:
            err = _rel(float(np.mean(sol.Y[i])), sc.oracle(float(sc.grid.times[i])))
            rows.append(Row("closed_form_mid", err, tol, err < tol))
    return rows


def _cole_hopf(ctx: Context):
    sc = ctx.scenario
    if sc.name != "entropic":
        raise ConfigError(f"checks: cole_hopf applies to the entropic scenario only, not {sc.name!r}")
    oracle, _ = verify.entropic_oracle(ctx.bundle, sc.driver.xi, float(sc.params["driver"]["gamma"]))
    err = _rel(ctx.solution.Y0, oracle)
    return [Row("cole_hopf", err, 0.02, err < 0.02)]


def _universal_bounds(ctx: Context):
    drv = ctx.scenario.driver
    if drv.xi_sup is None:
        raise ConfigError(f"checks: universal bounds need a bounded terminal condition ({ctx.scenario.name!r})")
    evals = verify.check_universal_bounds(ctx.solution, ctx.report(), drv.bound_params(ctx.scenario.grid.T))
    return [Row(f"bound_{e.name}", e.lhs, e.rhs, e.passed) for e in evals]


def _jump_norm_lemmas(ctx: Context):
    return [Row(r["check"], r["lhs"], r["rhs"], r["passed"]) for r in check_jump_norm_lemmas(ctx.report())]


def _picard_geometric(ctx: Context):
    sol = ctx.solution
    traces = [sol.trace] if sol.cascade is None else [tr for lvl in sol.cascade.traces[-1:] for tr in lvl]
    worst, ok = 0.0, True
    for tr in traces:
        res = verify.picard_geometric_check(tr, sol.eps_fix)
        worst = max(worst, res["last_ratio"])
        ok &= res["passed"]
    return [Row("picard_geometric", worst, 0.9, ok)]


def _m_convergence(ctx: Context):
    sol = ctx.solution
    if sol.cascade is None:
        if ctx.scenario.driver.xi_sup is None:
            raise ConfigError("checks: m_convergence needs a bounded terminal condition")
        sol = solve_qexp_absde(ctx.bundle, ctx.scenario.driver, ctx.solver_cfg, ctx.basis)
    res = verify.m_convergence_check(sol.cascade)
    last = res["distances"][-1] if res["distances"] else 0.0
    return [Row("m_convergence", last, sol.cascade.eps_fix, res["passed"])]


def _structure(ctx: Context):
    drv = ctx.scenario.driver
    probes = make_probes(drv, ctx.scenario.grid, n=256, seed=12345, d=ctx.bundle.model.d, n_state=ctx.bundle.model.n)
    rep = check_structure_condition(drv, probes, ctx.scenario.grid)
    return [Row("structure_condition", 0.0 - rep["worst_slack"] + 0.0, 0.0, rep["passed"])]


def _energy(ctx: Context):
    rows = []
    h2 = ctx.report().H2_BMO
    for n in ctx.opts["energy_orders"]:
        r = energy_check(ctx.solution, ctx.bundle, int(n), h2, ctx.basis, ctx.opts["n_se"])
        rows.append(Row(f"energy_n{n}", r["lhs"], r["rhs"], r["passed"]))
    return rows


def _doleans(ctx: Context):
    r = doleans_check(ctx.solution.Z, ctx.bundle, ctx.opts["n_se"])
    rhs = ctx.opts["n_se"] * r["se"] if r["se"] > 0 else 1e-12
    return [Row("doleans_mean", abs(r["mean"] - 1.0), rhs, r["passed"])]


def _z_growth(ctx: Context):
    r = verify.z_growth_check(ctx.solution, ctx.bundle, ctx.opts["rho"])
    return [
        Row("z_growth_Z", r["Z_q999"], 2.0 * r["Z_median"], r["Z_q999"] <= 2.0 * r["Z_median"]),
        Row("z_growth_psi", r["psi_q999"], 2.0 * r["psi_median"], r["psi_q999"] <= 2.0 * r["psi_median"]),
    ]


def _comparison(ctx: Context):
    sc = ctx.scenario
    upper = sc.partner or verify.perturb_driver(sc.driver, 1.0, g=lambda t, x, a, y, z, psi: np.full(x.shape[0], 0.5),
                                                g_sup=0.5)
    r = verify.comparison_experiment(ctx.bundle, sc.driver, upper, ctx.solver_cfg, ctx.basis,
                                     noise_floor=ctx.opts["comparison_floor"])
    return [Row("comparison", r["violation"], r["noise_floor"], r["passed"])]


def _stability(ctx: Context):
    r = verify.stability_experiment(
        ctx.bundle, ctx.scenario.driver, ctx.opts["stability_eps"], ctx.solver_cfg, ctx.basis,
        eta=lambda x: np.cos(x[:, 0]), g=lambda t, x, a, y, z, psi: np.ones(x.shape[0]), eta_sup=1.0, g_sup=1.0,
        p=ctx.solver_cfg.p,
    )
    slope = r["slope"]
    rows = [Row("stability_slope", abs(slope - 1.0), 0.15, bool(abs(slope - 1.0) <= 0.15))]
    if any(e == 0 for e, _, _ in r["rows"]):
        zero = max(n for e, n, _ in r["rows"] if e == 0)
        rows.append(Row("stability_zero", zero, 0.0, r["zero_exact"]))
    return rows


def _u_regularity(ctx: Context):
    r = verify.u_regularity_check(ctx.u_table(), ctx.opts["rho"], ctx.opts["alpha"])
    return [
        Row("u_space_ratio", r["space_ratio_spread"], 10.0, r["space_ratio_spread"] <= 10.0),
        Row("u_time_exponent", r["time_exponent"], 0.0, r["time_exponent"] > 0,
            slack=r["time_exponent"]),
    ]


def _u_seed_spread(ctx: Context):
    r = verify.u_seed_spread(ctx.u_table(), ctx.opts["n_se"])
    return [Row("u_seed_spread", r["worst_z"], ctx.opts["n_se"], r["passed"])]


def _uniqueness(ctx: Context):
    r = verify.uniqueness_proxy(ctx.bundle, ctx.scenario.driver, ctx.solver_cfg, ctx.basis)
    return [Row("uniqueness", r["gap"], r["eps_fix"], r["passed"])]


CHECKS: dict[str, Callable[[Context], list]] = {
    "closed_form": _closed_form,
    "cole_hopf": _cole_hopf,
    "universal_bounds": _universal_bounds,
    "jump_norm_lemmas": _jump_norm_lemmas,
    "picard_geometric": _picard_geometric,
    "m_convergence": _m_convergence,
    "structure_condition": _structure,
    "energy": _energy,
    "doleans": _doleans,
    "z_growth": _z_growth,
    "comparison": _comparison,
    "stability": _stability,
    "u_regularity": _u_regularity,
    "u_seed_spread": _u_seed_spread,
    "uniqueness": _uniqueness,
}


def results_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(HEADER) + "\n")
    for r in rows:
        buf.write(",".join(r.cells()) + "\n")
    return buf.getvalue()


def node_summaries_csv(solution, bundle) -> str:
    buf = io.StringIO()
    buf.write("node,t,Y_mean,Y_std,Z_abs_mean,psi_abs_mean\n")
    for i in range(bundle.grid.N + 1):
        Y = solution.Y[i]
        cells = (i, bundle.grid.times[i], Y.mean(), Y.std(), np.abs(solution.Z[i]).mean(),
                 np.abs(solution.psi[i]).mean() if solution.psi.shape[2] else 0.0)
        buf.write(",".join([str(i)] + [_fmt(c) for c in cells[1:]]) + "\n")
    return buf.getvalue()


def _versions() -> dict:
    return {"absdelab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pyyaml": yaml.__version__, "jsonschema": metadata.version("jsonschema")}


@dataclass
class RunResult:
    exit_code: int
    rows: list
    out_dir: Optional[Path]
    message: str = ""


def run_config(cfg: dict, out_dir=None, write: bool = True) -> RunResult:
    """Run a resolved config (see :func:`resolve_config`)."""
    out = Path(out_dir or cfg["output"]["dir"])
    t0 = time.perf_counter()
    sc = scenarios.build(cfg["scenario"], {k: cfg[k] for k in ("model", "grid", "driver")})
    sp = cfg["solver"]
    solver_cfg = SolverConfig(eps_fix=sp["eps_fix"], max_iter=sp["max_iter"], beta_weight=sp["beta_weight"],
                              window=sp["window"], schedule=tuple(sp["schedule"]), p=sp["p"],
                              early_stop=sp["early_stop"])
    bp = cfg["basis"]
    basis = RegressionBasis(bp["degree"], bp["ridge"], bp["winsor"])
    mc = cfg["monte_carlo"]
    manifest = {"config": cfg, "seed": mc["seed"], "versions": _versions(), "kernel_backend": kernels.BACKEND,
                "threads": thread_count()}
    if write:
        out.mkdir(parents=True, exist_ok=True)
    bundle = simulate_paths(sc.model, sc.grid, sc.marks, (0.0, sc.x0), mc["n_paths"], mc["seed"])
    try:
        solution = solve(bundle, sc.driver, solver_cfg, basis)
    except (NonConvergenceError, WindowSelectionError) as exc:
        if write:
            (out / "trace.json").write_text(json.dumps({"error": str(exc), "trace": getattr(exc, "trace", [])}, indent=2))
            manifest["status"] = "non-convergence"
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
        return RunResult(EXIT_NONCONV, [], out, str(exc))
    except StructureViolationError as exc:
        rows = [Row("structure_condition", 1.0, 0.0, False)]
        if write:
            (out / "results.csv").write_text(results_csv(rows))
        return RunResult(EXIT_CHECK, rows, out, str(exc))
    ctx = Context(cfg, sc, bundle, solution, basis, solver_cfg)
    rows = []
    for name in cfg["checks"]:
        rows.extend(CHECKS[name](ctx))
    ok = all(r.passed for r in rows)
    manifest["status"] = "pass" if ok else "fail"
    manifest["elapsed_seconds"] = round(time.perf_counter() - t0, 3)
    manifest["Y0"] = solution.Y0
    if write:
        (out / "results.csv").write_text(results_csv(rows))
        if cfg["output"]["node_summaries"]:
            (out / "nodes.csv").write_text(node_summaries_csv(solution, bundle))
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return RunResult(EXIT_OK if ok else EXIT_CHECK, rows, out)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    return str(o)
