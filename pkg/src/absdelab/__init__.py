"""Regression Monte Carlo lab for anticipated quadratic-exponential BSDEs with jumps."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
