"""Pure-numpy dense-layer kernels, used when the compiled extension is absent."""
import numpy as np
from scipy.special import erf

ACT_IDENTITY, ACT_TANH, ACT_GELU = 0, 1, 2

_INV_SQRT2 = 0.70710678118654752440
_INV_SQRT2PI = 0.39894228040143267794


def dense_forward(x, w, b, act):
    z = x @ w.T + b
    if act == ACT_TANH:
        h = np.tanh(z)
        return h, 1.0 - h * h
    if act == ACT_GELU:
        cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
        return z * cdf, cdf + z * _INV_SQRT2PI * np.exp(-0.5 * z * z)
    return z, np.ones_like(z)


def dense_backward(x, w, dact, upstream):
    gz = upstream * dact
    return gz.T @ x, gz.sum(axis=0), gz @ w
