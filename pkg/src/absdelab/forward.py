"""Forward jump-diffusion: time grids, mark measures, Euler simulation and moment checks."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CHUNK_SIZE = 4096


class ModelEvaluationError(RuntimeError):
    """A model coefficient returned a non-finite value."""


def thread_count() -> int:
    env = os.environ.get("ABSDELAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two nodes")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if T <= 0 or N < 1:
            raise ValueError("need T > 0 and N >= 1")
        t = np.linspace(0.0, T, N + 1)
        t[-1] = T
        return cls(t)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Largest node index i with t_i <= t (within tol)."""
        i = int(np.searchsorted(self.times, t + tol, side="right")) - 1
        return min(max(i, 0), self.N)


@dataclass(frozen=True)
class MarkComponent:
    """One jump component, restricted to marks with |e| >= cutoff.

    ``marks``/``weights`` is the quadrature for integrals against nu; the weights
    sum to the component intensity. ``sampler(rng, size)`` draws marks from the
    normalized measure; by default marks are drawn from the quadrature atoms.
    """

    marks: np.ndarray
    weights: np.ndarray
    cutoff: float = 0.0
    sampler: Optional[Callable] = None

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.marks, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if e.shape != w.shape:
            raise ValueError("marks and weights must have the same shape")
        if np.any(w <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.any(np.abs(e) < self.cutoff):
            raise ValueError("quadrature marks below the small-jump cutoff")
        if not np.isfinite(np.sum(w * e**2)):
            raise ValueError("second moment of the mark measure must be finite")
        object.__setattr__(self, "marks", e)
        object.__setattr__(self, "weights", w)

    @property
    def intensity(self) -> float:
        return float(self.weights.sum())

    def sample(self, rng: np.random.Generator, size: int):
        """Return (marks, quadrature index or -1)."""
        if self.sampler is not None:
            e = np.asarray(self.sampler(rng, size), dtype=float)
            return e, np.full(size, -1, dtype=np.int64)
        q = rng.choice(self.marks.size, size=size, p=self.weights / self.intensity)
        return self.marks[q], q.astype(np.int64)


@dataclass(frozen=True)
class MarkMeasureSpec:
    components: tuple = ()

    @classmethod
    def atoms(cls, *comps) -> "MarkMeasureSpec":
        """Build from (marks, weights) pairs, one pair per component."""
        return cls(tuple(MarkComponent(np.asarray(e), np.asarray(w)) for e, w in comps))

    @classmethod
    def empty(cls) -> "MarkMeasureSpec":
        return cls(())

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([c.intensity for c in self.components])

    @property
    def e(self) -> np.ndarray:
        """All quadrature marks, flattened across components."""
        if not self.components:
            return np.zeros(0)
        return np.concatenate([c.marks for c in self.components])

    @property
    def w(self) -> np.ndarray:
        if not self.components:
            return np.zeros(0)
        return np.concatenate([c.weights for c in self.components])

    @property
    def comp(self) -> np.ndarray:
        if not self.components:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(
            [np.full(c.marks.size, i, dtype=np.int64) for i, c in enumerate(self.components)]
        )

    @property
    def Q(self) -> int:
        return int(sum(c.marks.size for c in self.components))

    def offset(self, comp: int) -> int:
        return int(sum(c.marks.size for c in self.components[:comp]))

    def l2_norm_sq(self, psi: np.ndarray) -> np.ndarray:
        """||psi||^2_{L2(nu)} for psi given at the quadrature marks (last axis)."""
        if self.Q == 0:
            return np.zeros(psi.shape[:-1])
        return (psi**2) @ self.w


def _zero_drift(t, x):
    return np.zeros_like(x)


@dataclass(frozen=True)
class ForwardModel:
    """Lipschitz jump diffusion dX = b dt + sigma dW + sum_i gamma_i dmu~_i.

    Coefficients are vectorised over paths: ``drift(t, x) -> (P, n)``,
    ``diffusion(t, x) -> (P, n, d)``, ``jump(t, x, e, comp) -> (P, n)`` with
    ``e`` of shape (P,).
    """

    n: int
    d: int
    drift: Callable = _zero_drift
    diffusion: Optional[Callable] = None
    jump: Optional[Callable] = None
    lipschitz: float = 1.0

    @classmethod
    def constant(cls, b: float = 0.0, sigma: float = 1.0, jump_scale: float = 0.0) -> "ForwardModel":
        """Scalar model dX = b dt + sigma dW + jump_scale * e dmu~."""
        b, sigma, js = float(b), float(sigma), float(jump_scale)
        return cls(
            n=1,
            d=1,
            drift=lambda t, x: np.full_like(x, b),
            diffusion=lambda t, x: np.full((x.shape[0], 1, 1), sigma),
            jump=(lambda t, x, e, c: js * e[:, None] + 0.0 * x) if js != 0.0 else None,
            lipschitz=0.0,
        )

    def b(self, t, x):
        return np.asarray(self.drift(t, x), dtype=float)

    def sigma(self, t, x):
        if self.diffusion is None:
            return np.zeros((x.shape[0], self.n, self.d))
        return np.asarray(self.diffusion(t, x), dtype=float)

    def gamma(self, t, x, e, comp):
        if self.jump is None:
            return np.zeros_like(x)
        return np.asarray(self.jump(t, x, e, comp), dtype=float)


@dataclass
class JumpEvents:
    node: np.ndarray
    path: np.ndarray
    comp: np.ndarray
    mark: np.ndarray
    qidx: np.ndarray

    @classmethod
    def empty(cls) -> "JumpEvents":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0), z.copy())

    def __len__(self):
        return self.node.size


@dataclass
class PathBundle:
    grid: TimeGrid
    X: np.ndarray  # (N+1, P, n)
    dW: np.ndarray  # (N, P, d)
    events: JumpEvents
    start_t: float
    start_x: np.ndarray
    start_index: int
    seed: int
    model: ForwardModel = field(repr=False)
    marks: MarkMeasureSpec = field(repr=False)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def P(self) -> int:
        return self.X.shape[1]

    def step_dt(self, i: int) -> float:
        """Effective length of step i (shortened when the start time is inside it)."""
        lo = max(self.grid.times[i], self.start_t)
        return max(float(self.grid.times[i + 1] - lo), 0.0)

    def replay(self) -> np.ndarray:
        """Rebuild X from the stored increments and jumps."""
        X = np.empty_like(self.X)
        X[: self.start_index + 1] = self.start_x
        for i in range(self.start_index, self.grid.N):
            sel = self.events.node == i
            jsum = _jump_sum(
                self.model,
                self.grid.times[i],
                X[i],
                self.events.path[sel],
                self.events.comp[sel],
                self.events.mark[sel],
                self.marks.k,
            )
            X[i + 1] = _euler_step(
                self.model, self.marks, self.grid.times[i], self.step_dt(i), X[i], self.dW[i], jsum
            )
        return X


def _jump_sum(model, t, x, paths, comps, marks_, k):
    jsum = np.zeros_like(x)
    for c in range(k):
        sel = comps == c
        if not np.any(sel):
            continue
        p = paths[sel]
        np.add.at(jsum, p, model.gamma(t, x[p], marks_[sel], c))
    return jsum


def _compensator(model, marks, t, x):
    out = np.zeros_like(x)
    for c, comp in enumerate(marks.components):
        for e, w in zip(comp.marks, comp.weights):
            out += w * model.gamma(t, x, np.full(x.shape[0], e), c)
    return out


def _euler_step(model, marks, t, dt, x, dw, jsum):
    drift = model.b(t, x)
    sig = model.sigma(t, x)
    comp = _compensator(model, marks, t, x) if marks.k else 0.0
    step = x + drift * dt + np.einsum("pnd,pd->pn", sig, dw) + jsum - dt * comp
    return step


def _simulate_chunk(model, grid, marks, s0, start_t, x0, n, seed, chunk_id):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chunk_id,))))
    N = grid.N
    X = np.empty((N + 1, n, model.n))
    dW = np.zeros((N, n, model.d))
    X[: s0 + 1] = x0
    ev = {k: [] for k in ("node", "path", "comp", "mark", "qidx")}
    for i in range(s0, N):
        t = grid.times[i]
        dt = max(float(grid.times[i + 1] - max(t, start_t)), 0.0)
        dW[i] = rng.standard_normal((n, model.d)) * np.sqrt(dt)
        paths, comps, mks = [], [], []
        for c, comp in enumerate(marks.components):
            cnt = rng.poisson(comp.intensity * dt, n)
            tot = int(cnt.sum())
            if tot == 0:
                continue
            e, q = comp.sample(rng, tot)
            p = np.repeat(np.arange(n), cnt)
            paths.append(p)
            comps.append(np.full(tot, c, dtype=np.int64))
            mks.append(e)
            ev["node"].append(np.full(tot, i, dtype=np.int64))
            ev["path"].append(p)
            ev["comp"].append(comps[-1])
            ev["mark"].append(e)
            ev["qidx"].append(q)
        if paths:
            jsum = _jump_sum(model, t, X[i], np.concatenate(paths), np.concatenate(comps), np.concatenate(mks), marks.k)
        else:
            jsum = np.zeros_like(X[i])
        X[i + 1] = _euler_step(model, marks, t, dt, X[i], dW[i], jsum)
        if not np.all(np.isfinite(X[i + 1])):
            bad = int(np.argwhere(~np.isfinite(X[i + 1]))[0, 0])
            raise ModelEvaluationError(
                f"non-finite state at t={t:.6g}, x={X[i, bad]}, path={chunk_id * CHUNK_SIZE + bad}"
            )
    cat = {k: (np.concatenate(v) if v else np.zeros(0, dtype=np.float64 if k == "mark" else np.int64)) for k, v in ev.items()}
    return X, dW, cat


def simulate_paths(
    model: ForwardModel,
    grid: TimeGrid,
    marks: MarkMeasureSpec,
    start=(0.0, 0.0),
    n_paths: int = 1000,
    seed: int = 0,
    threads: Optional[int] = None,
) -> PathBundle:
    """Euler scheme with compensated compound-Poisson jumps.

    Paths are generated in fixed-size chunks, each with its own seed stream
    derived from ``(seed, chunk index)``, so the bundle does not depend on the
    number of worker threads.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    t0, x0 = start
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(model.n)
    if not 0.0 <= t0 <= grid.T:
        raise ValueError("start time outside the grid")
    s0 = grid.index_of(t0)
    sizes = [min(CHUNK_SIZE, n_paths - o) for o in range(0, n_paths, CHUNK_SIZE)]
    jobs = [(model, grid, marks, s0, t0, x0, n, seed, c) for c, n in enumerate(sizes)]
    nthreads = threads or thread_count()
    if nthreads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(lambda a: _simulate_chunk(*a), jobs))
    else:
        parts = [_simulate_chunk(*a) for a in jobs]
    X = np.concatenate([p[0] for p in parts], axis=1)
    dW = np.concatenate([p[1] for p in parts], axis=1)
    offsets = np.cumsum([0] + sizes[:-1])
    ev = JumpEvents(
        node=np.concatenate([p[2]["node"] for p in parts]),
        path=np.concatenate([p[2]["path"] + o for p, o in zip(parts, offsets)]),
        comp=np.concatenate([p[2]["comp"] for p in parts]),
        mark=np.concatenate([p[2]["mark"] for p in parts]),
        qidx=np.concatenate([p[2]["qidx"] for p in parts]),
    )
    return PathBundle(grid, X, dW, ev, float(t0), x0, s0, int(seed), model, marks)


def check_lipschitz(model: ForwardModel, marks: MarkMeasureSpec, grid: TimeGrid,
                    n_probes: int = 256, radius: float = 5.0, seed: int = 0) -> dict:
    """Probe |b(x)-b(x')| + |sigma(x)-sigma(x')| <= K|x-x'| and the jump analogue."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, (n_probes, model.n))
    xp = rng.uniform(-radius, radius, (n_probes, model.n))
    t = rng.choice(grid.times, n_probes)
    dx = np.linalg.norm(x - xp, axis=1)
    worst_diff, worst_jump = 0.0, 0.0
    for j in range(n_probes):
        xi, xj = x[j : j + 1], xp[j : j + 1]
        lhs = np.linalg.norm(model.b(t[j], xi) - model.b(t[j], xj)) + np.linalg.norm(
            model.sigma(t[j], xi) - model.sigma(t[j], xj)
        )
        worst_diff = max(worst_diff, lhs - model.lipschitz * dx[j])
        for c, comp in enumerate(marks.components):
            for e in comp.marks:
                ee = np.array([e])
                g = np.linalg.norm(model.gamma(t[j], xi, ee, c) - model.gamma(t[j], xj, ee, c))
                worst_jump = max(worst_jump, g - model.lipschitz * min(1.0, abs(e)) * dx[j])
    tol = 1e-12 * (1 + radius)
    return {
        "passed": bool(worst_diff <= tol and worst_jump <= tol),
        "worst_diffusion_excess": float(worst_diff),
        "worst_jump_excess": float(worst_jump),
    }


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def check_moment_bounds(
    model: ForwardModel,
    grid: TimeGrid,
    marks: MarkMeasureSpec,
    pairs: Sequence,
    p: int = 2,
    n_paths: int = 10000,
    seed: int = 0,
    ceiling: float = 50.0,
    window: Optional[float] = None,
) -> list[dict]:
    """Empirical ratios for the sup-moment, modulus and flow-continuity laws.

    For each pair ((t, x), (t', x')) both flows share the seed, so identical
    data give identical paths. ``window`` is the modulus window h (default T/4).
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    h = grid.T / 4 if window is None else window
    rows = []
    for (t, x), (tp, xp) in pairs:
        b1 = simulate_paths(model, grid, marks, (t, x), n_paths, seed)
        b2 = simulate_paths(model, grid, marks, (tp, xp), n_paths, seed)
        nx = float(np.linalg.norm(np.atleast_1d(x)))
        nxp = float(np.linalg.norm(np.atleast_1d(xp)))
        norms = np.linalg.norm(b1.X, axis=2)
        sup_mom = np.max(norms, axis=0) ** p
        a_mean, a_se = _mean_se(sup_mom)
        mod = _modulus(b1.X, grid, t, h) ** p
        b_mean, b_se = _mean_se(mod)
        diff = np.linalg.norm(b1.X - b2.X, axis=2)
        c_vals = np.max(diff, axis=0) ** p
        c_term = diff[-1] ** p
        c_mean, c_se = _mean_se(c_vals)
        ct_mean, ct_se = _mean_se(c_term)
        dxp = float(np.linalg.norm(np.atleast_1d(x) - np.atleast_1d(xp))) ** p
        c_den = dxp + (1 + max(nx, nxp) ** p) * abs(t - tp)
        row = {
            "pair": ((t, x), (tp, xp)),
            "sup_moment": a_mean,
            "sup_moment_se": a_se,
            "sup_ratio": a_mean / (1 + nx**p),
            "modulus_moment": b_mean,
            "modulus_moment_se": b_se,
            "modulus_ratio": b_mean / ((1 + nx**p) * h),
            "flow_moment": c_mean,
            "flow_moment_se": c_se,
            "flow_terminal_moment": ct_mean,
            "flow_terminal_se": ct_se,
            "flow_ratio": (c_mean / c_den) if c_den > 0 else (0.0 if c_mean == 0 else np.inf),
        }
        row["flagged"] = bool(
            row["sup_ratio"] > ceiling or row["modulus_ratio"] > ceiling or row["flow_ratio"] > ceiling
        )
        rows.append(row)
    return rows


def _modulus(X, grid, t, h):
    """Per path sup over s in [t, t+h] of |X_s - X_t| on grid nodes."""
    i0 = grid.index_of(t)
    i1 = grid.index_of(min(grid.times[i0] + h, grid.T))
    seg = X[i0 : i1 + 1] - X[i0]
    return np.max(np.linalg.norm(seg, axis=2), axis=0)


def modulus_scaling(model, grid, marks, start, p=2, h=0.25, n_paths=20000, seed=0) -> dict:
    """Modulus moments at window h and h/2; the ratio should be about 2 (linear-in-h law)."""
    b = simulate_paths(model, grid, marks, start, n_paths, seed)
    m1 = _mean_se(_modulus(b.X, grid, start[0], h) ** p)
    m2 = _mean_se(_modulus(b.X, grid, start[0], h / 2) ** p)
    return {"h": h, "moment_h": m1, "moment_half": m2, "ratio": m1[0] / m2[0] if m2[0] > 0 else np.inf}


def jump_integral_moment_check(
    marks: MarkMeasureSpec,
    U: Callable,
    L: Callable,
    grid: TimeGrid,
    p: int = 2,
    n_paths: int = 10000,
    seed: int = 0,
    growth_limit: float = 2.0,
) -> dict:
    """Moment of the compensated jump integral of U against the L-based bound.

    ``U(s, e, comp)`` is the integrand with |U| <= L(s) (1 ^ |e|); ``L(s)`` is
    deterministic. The fitted constant is LHS / int_0^T |L_s|^p ds, computed at
    P/4, P/2 and P; it is flagged when it grows by more than ``growth_limit``.
    """
    model = ForwardModel(n=1, d=1, drift=lambda t, x: np.zeros_like(x), diffusion=None,
                         jump=lambda t, x, e, c: np.asarray(U(t, e, c), dtype=float)[:, None] + 0.0 * x)
    b = simulate_paths(model, grid, marks, (0.0, 0.0), n_paths, seed)
    M = b.X[:, :, 0]
    sup_p = np.max(np.abs(M), axis=0) ** p
    term_p = np.abs(M[-1]) ** p
    s = grid.times
    Lp = np.abs(np.array([L(si) for si in s], dtype=float)) ** p
    rhs = float(np.sum(0.5 * (Lp[1:] + Lp[:-1]) * grid.dt))
    consts = []
    for frac in (4, 2, 1):
        m = max(1, n_paths // frac)
        lhs = float(sup_p[:m].mean())
        consts.append(lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf))
    lhs, lhs_se = _mean_se(sup_p)
    tm, tse = _mean_se(term_p)
    base = consts[0] if consts[0] > 0 else None
    growth = consts[-1] / base if base else (1.0 if consts[-1] == 0 else np.inf)
    return {
        "lhs_sup": lhs,
        "lhs_sup_se": lhs_se,
        "lhs_terminal": tm,
        "lhs_terminal_se": tse,
        "rhs": rhs,
        "fitted_constants": consts,
        "flagged": bool(growth > growth_limit),
    }
