"""Shared test helpers: finite differences and small random model factories."""

import numpy as np
import pytest

from wvae.model import ViewSpec, WvaeModel

FD_STEP = 1e-5


def central_diff(f, x, step=FD_STEP):
    """Central finite-difference gradient of scalar f over a flat array x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_err(a, b):
    """Gradient-check error: |a-b| / max(1, |a|, |b|), elementwise max."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())


ALL_FAMILIES = ("gaussian-diag", "gaussian-full", "bernoulli", "poisson", "exponential")


def random_views(rng, specs, n):
    views = []
    for s in specs:
        if s.family == "bernoulli":
            views.append(rng.integers(0, 2, size=(n, s.dim)).astype(float))
        elif s.family == "poisson":
            views.append(rng.poisson(3.0, size=(n, s.dim)).astype(float))
        elif s.family == "exponential":
            views.append(rng.exponential(2.0, size=(n, s.dim)))
        else:
            views.append(rng.normal(size=(n, s.dim)))
    return views


def small_model(rng, specs=None, z_card=3, widths=(5, 7), seed=None):
    if specs is None:
        specs = [ViewSpec("gaussian-diag", 3, 0.5), ViewSpec("bernoulli", 4, 0.5)]
    if seed is None:
        seed = int(rng.integers(0, 2**31))
    return WvaeModel(z_card, specs, widths=widths, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
