"""Central finite-difference oracle for the bias-alignment network parameters."""

import numpy as np

from vldebias.ba_net import init_params
from vldebias.simcore import SimilarityConfig

H = 1e-5


def random_params(dim, seed, scale=0.5):
    """Non-zero parameters so every loss has a non-trivial gradient."""
    rng = np.random.default_rng([seed, 99])
    p = init_params(dim, seed)
    p.W2 = scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    p.b1 = 0.1 * rng.standard_normal(dim)
    p.b2 = 0.1 * rng.standard_normal(dim)
    return p


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def problem(seed, d=8, n=4, m=16):
    rng = np.random.default_rng(seed)
    return {
        "T": unit_rows(rng, n, d),
        "C": unit_rows(rng, n, d),
        "V": unit_rows(rng, n, d),
        "Qt": unit_rows(rng, m, d),
        "Qv": unit_rows(rng, m, d),
        "betas": rng.integers(0, 2, n),
        "cfg": SimilarityConfig(0.01),
    }


def fd_gradient(params, loss_fn):
    """Central differences of ``loss_fn(params)`` w.r.t. every parameter entry."""
    theta = params.flat()
    grad = np.empty_like(theta)
    probe = params.copy()
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + H
        probe.set_flat(theta)
        up = loss_fn(probe)
        theta[i] = orig - H
        probe.set_flat(theta)
        down = loss_fn(probe)
        theta[i] = orig
        grad[i] = (up - down) / (2 * H)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """Worst per-entry relative error; ``floor`` keeps exact zeros from dividing by zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
