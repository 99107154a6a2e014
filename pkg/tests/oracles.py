"""Test-side oracles, deliberately independent of bikd.verify."""
from __future__ import annotations

import numpy as np


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``f`` is evaluated on perturbed copies of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (f(xp) - f(xm)) / (2.0 * step)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(b).max(), 1e-12)
    return float(np.abs(np.asarray(a) - np.asarray(b)).max() / scale)


def log_softmax_ref(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / tau
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def sigmoid_ref(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))
