"""Shared fixtures and numerical-check helpers."""

import numpy as np
import pytest

from rxfusion import autodiff as ad
from rxfusion.geometry import SphericalGrid


def central_diff_check(fn, tensors, rng, n_coords=20, eps=1e-6, tol=1e-4):
    """Compare tape gradients of a scalar-valued fn against finite differences.

    fn re-evaluates the loss from the current tensor contents. Checks up
    to n_coords randomly chosen coordinates per tensor and returns the
    worst relative error seen.
    """
    with ad.Tape():
        loss = fn()
        ad.backward(loss)
    grads = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.grad = None

    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        k = min(n_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn().data)
            flat[i] = keep - eps
            lo = float(fn().data)
            flat[i] = keep
            num = (hi - lo) / (2.0 * eps)
            rel = abs(num - gflat[i]) / max(1.0, abs(num), abs(gflat[i]))
            worst = max(worst, rel)
    assert worst < tol, f"gradient mismatch: worst rel err {worst:.3e}"
    return worst


def interior_points(rng, n, nd, shape):
    """Random sample positions in level-cell units, kept away from cell
    boundaries so finite differences stay one-sided-consistent."""
    dims = np.asarray(shape, dtype=np.float64)
    cells = rng.integers(0, dims.astype(int) - 1, size=(n, nd))
    frac = rng.uniform(0.1, 0.9, size=(n, nd))
    return cells + frac


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return SphericalGrid(
        range_span=(2.0, 34.0),
        elevation_span=(-0.25, 0.25),
        azimuth_span=(-0.6, 0.6),
        extents=(8, 4, 8),
    )
