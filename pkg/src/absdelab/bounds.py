"""Closed-form universal bounds on (Y, Z, psi) in terms of the structure parameters."""
import math

from .driver import BoundParamsA

_LOG_MAX = 700.0


def _exp(v):
    if v > _LOG_MAX:
        raise OverflowError(f"bound exponent {v:.4g} exceeds the floating range")
    return math.exp(v)


def universal_bound_Y(A: BoundParamsA) -> float:
    """exp(T (beta + delta e^{beta T})) (xi_sup + T l_bar)."""
    inner = A.beta * A.T
    if inner > _LOG_MAX:
        raise OverflowError("beta * T exceeds the floating range")
    return _exp(A.T * (A.beta + A.delta * math.exp(inner))) * (A.xi_sup + A.T * A.l_bar)


def universal_bound_Z_psi(A: BoundParamsA, Y_sup: float) -> tuple[float, float]:
    """Squared BMO bounds for Z and psi given the sup norm of Y."""
    if Y_sup < 0:
        raise ValueError("Y_sup must be nonnegative")
    g = A.gamma
    pref = _exp(4.0 * g * Y_sup) / g**2
    bracket = A.l_bar + (A.beta + A.delta) * Y_sup
    z2 = pref * (1.0 + 2.0 * g * A.T * bracket)
    psi2 = pref * (2.0 + 4.0 * g * A.T * bracket) + 4.0 * Y_sup**2
    return z2, psi2
