"""Regression estimators of conditional expectations given the current state."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np

from . import kernels
from .driver import AnticipatedFunctional, anticipated_raw
from .forward import ForwardModel, MarkMeasureSpec, TimeGrid


class IllConditionedError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials of total degree <= ``degree`` in the standardised state, with ridge.

    States beyond the ``winsor`` and ``1 - winsor`` sample quantiles are clipped
    before the features are formed, so the polynomial never extrapolates.
    """

    degree: int = 5
    ridge: float = 1e-8
    winsor: float = 1e-3

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if not 0 <= self.winsor < 0.5:
            raise ValueError("winsor must lie in [0, 0.5)")

    def exponents(self, n: int) -> list[tuple]:
        out = [()]
        for k in range(1, self.degree + 1):
            out.extend(combinations_with_replacement(range(n), k))
        return out

    def size(self, n: int) -> int:
        return len(self.exponents(n))

    def features(self, z: np.ndarray) -> np.ndarray:
        """Feature matrix of standardised states z with shape (P, n)."""
        cols = []
        for ex in self.exponents(z.shape[1]):
            c = np.ones(z.shape[0])
            for j in ex:
                c = c * z[:, j]
            cols.append(c)
        return np.stack(cols, axis=1)


@dataclass
class FitResult:
    coef: np.ndarray  # (B, m)
    shift: np.ndarray
    scale: np.ndarray
    degree: int
    residual_rms: np.ndarray
    condition: float
    basis: RegressionBasis
    fitted: np.ndarray = field(repr=False)
    zlo: Optional[np.ndarray] = None
    zhi: Optional[np.ndarray] = None
    bounds: Optional[tuple] = None  # target range when the fit was bounded

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Fitted values at states x of shape (P, n); returns (P, m)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = (x - self.shift) / self.scale
        if self.zlo is not None:
            z = np.clip(z, self.zlo, self.zhi)
        if z.shape[1] == 1:
            out = kernels.poly_eval(z[:, 0], self.coef[: self.degree + 1])
        else:
            out = RegressionBasis(self.degree, self.basis.ridge).features(z) @ self.coef
        if self.bounds is not None:
            out = np.clip(out, self.bounds[0], self.bounds[1])
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = self.predict(x)
        return out[:, 0] if out.shape[1] == 1 else out


class Projector:
    """Least-squares projection onto the basis at fixed states.

    The normal equations are assembled and factorised once; every call to
    :meth:`fit` reuses them, which is what the backward sweeps need since the
    states at a node do not change across Picard iterations.
    """

    def __init__(self, states: np.ndarray, basis: RegressionBasis):
        x = np.asarray(states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.basis = basis
        P, n = x.shape
        self.shift = x.mean(axis=0)
        sd = x.std(axis=0)
        self.constant = bool(np.all(sd == 0))
        self.scale = np.where(sd > 0, sd, 1.0)
        self.degree = 0 if self.constant else basis.degree
        z = (x - self.shift) / self.scale
        self.zlo = self.zhi = None
        if basis.winsor > 0 and not self.constant:
            self.zlo, self.zhi = np.quantile(z, [basis.winsor, 1.0 - basis.winsor], axis=0)
            z = np.clip(z, self.zlo, self.zhi)
        self.z = z
        B = 1 if self.constant else basis.size(n)
        if P < B:
            raise ValueError(f"need at least {B} samples, got {P}")
        if self.constant:
            G = np.ones((1, 1))
            self._F = None
        elif n == 1:
            G = kernels.poly_gram(z[:, 0], self.degree) / P
            self._F = None
        else:
            self._F = basis.features(z)
            G = self._F.T @ self._F / P
        G = G + basis.ridge * np.eye(B)
        self.condition = float(np.linalg.cond(G))
        if basis.ridge == 0 and not (np.isfinite(self.condition) and self.condition < 1e13):
            raise IllConditionedError(
                f"normal equations ill-conditioned (cond={self.condition:.3g}); use ridge > 0"
            )
        self.G = G
        try:
            self._chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedError("normal equations are singular; use ridge > 0") from exc

    def _rhs(self, T):
        P = T.shape[0]
        if self.constant:
            return T.mean(axis=0)[None, :]
        if self._F is None:
            return kernels.poly_rhs(self.z[:, 0], T, self.degree) / P
        return self._F.T @ T / P

    def _eval(self, coef):
        if self.constant:
            return np.broadcast_to(coef[0], (self.x.shape[0], coef.shape[1])).copy()
        if self._F is None:
            return kernels.poly_eval(self.z[:, 0], coef)
        return self._F @ coef

    def fit(self, targets: np.ndarray, bounded: bool = False) -> FitResult:
        """Project targets of shape (P,) or (P, ...).

        With ``bounded`` the fitted values are clipped to the per-column target
        range, which any conditional expectation respects; the map is then no
        longer linear.
        """
        T = np.asarray(targets, dtype=float)
        squeeze = T.ndim == 1
        T2 = T[:, None] if squeeze else T.reshape(T.shape[0], -1)
        if not np.all(np.isfinite(T2)):
            raise ValueError("non-finite regression targets")
        R = self._rhs(T2)
        if self.constant:
            coef = R
        else:
            coef = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, R))
        fitted = self._eval(coef)
        bounds = None
        if bounded:
            bounds = (T2.min(axis=0), T2.max(axis=0))
            fitted = np.clip(fitted, bounds[0], bounds[1])
        rms = np.sqrt(np.mean((T2 - fitted) ** 2, axis=0))
        out = fitted[:, 0] if squeeze else fitted.reshape(T.shape)
        return FitResult(coef, self.shift, self.scale, self.degree, rms, self.condition, self.basis, out,
                         self.zlo, self.zhi, bounds)


def fit_conditional(states: np.ndarray, targets: np.ndarray, basis: RegressionBasis) -> FitResult:
    """Ridge least-squares estimate of E[target | X = state]; ``.fitted`` holds per-path values."""
    return Projector(states, basis).fit(targets)


def estimate_anticipated(Y: np.ndarray, functional: AnticipatedFunctional, i: int, states: np.ndarray,
                         basis: RegressionBasis, grid: TimeGrid, clamp: Optional[float] = None,
                         projector: Optional[Projector] = None, raw: Optional[np.ndarray] = None) -> np.ndarray:
    """Pathwise functional of the future of Y at node i, projected on the node-i state."""
    if not functional.active:
        return np.zeros(Y.shape[1])
    if raw is None:
        raw = anticipated_raw(Y, functional, grid, clamp=clamp, lo=i)
    proj = projector or Projector(states, basis)
    return proj.fit(raw[i]).fitted


def extract_Z(Y_next: np.ndarray, dW: np.ndarray, dt: float, states: np.ndarray, basis: RegressionBasis,
              projector: Optional[Projector] = None, Y_hat: Optional[np.ndarray] = None) -> np.ndarray:
    """E[Y_next dW / dt | X_i] per path, shape (P, d).

    Y_next is centred by its own conditional mean first; this leaves the
    conditional expectation unchanged and removes most of the variance.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    proj = projector or Projector(states, basis)
    dW = np.asarray(dW, dtype=float)
    if dW.ndim == 1:
        dW = dW[:, None]
    if Y_hat is None:
        Y_hat = proj.fit(Y_next).fitted
    target = (Y_next - Y_hat)[:, None] * dW / dt
    return proj.fit(target).fitted


def extract_psi(u_next: Callable, X: np.ndarray, model: ForwardModel, marks: MarkMeasureSpec,
                t: float) -> np.ndarray:
    """psi(e_q) = u_next(X + gamma_X(t, X, e_q)) - u_next(X) at every quadrature mark."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    P = X.shape[0]
    Q = marks.Q
    psi = np.zeros((P, Q))
    if Q == 0 or model.jump is None:
        return psi
    base = np.asarray(u_next(X), dtype=float).reshape(P)
    e_all, c_all = marks.e, marks.comp
    for q in range(Q):
        shifted = X + model.gamma(t, X, np.full(P, e_all[q]), int(c_all[q]))
        psi[:, q] = np.asarray(u_next(shifted), dtype=float).reshape(P) - base
    return psi
