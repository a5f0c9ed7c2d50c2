"""Pure numpy versions of the compiled kernels (same signatures and semantics)."""
import numpy as np


def poly_gram(z, degree):
    v = np.vander(z, degree + 1, increasing=True)
    return v.T @ v


def poly_rhs(z, targets, degree):
    v = np.vander(z, degree + 1, increasing=True)
    return v.T @ targets


def poly_eval(z, coef):
    nb = coef.shape[0]
    out = np.broadcast_to(coef[nb - 1], (z.shape[0], coef.shape[1])).copy()
    for k in range(nb - 2, -1, -1):
        out *= z[:, None]
        out += coef[k]
    return out


def suffix_max_abs(y):
    a = np.abs(y)
    return np.maximum.accumulate(a[::-1], axis=0)[::-1].copy()
