"""Approximate Gaussian filtering of scattered points via a bilateral grid.

Computes, for every point i and value channel c,

    out[c, i] ~= sum_j exp(-|coords_i - coords_j|^2 / 2) * values[c, j]

with coordinates already scaled by their kernel bandwidths, so the kernel
is the unit-bandwidth Gaussian in every axis. The sum includes j = i;
callers wanting the strict off-diagonal sum subtract the self term.

The approximation is the usual splat/blur/slice scheme: multilinear splat
onto a grid over the joint coordinate space, separable Gaussian blur,
multilinear slice back at the original points. Cells are CELL bandwidths
wide; splat and slice each convolve with a tent of variance CELL^2/6, so
the grid blur carries the remaining variance, and its kernel is rescaled
to mass sqrt(2*pi)/CELL so amplitudes match the unnormalized Gaussian.
Third-of-bandwidth cells keep the discrete blur well sampled and the
splat/slice quantization wobble near one percent per axis.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

CELL = 1.0 / 3.0  # grid cell size in bandwidth units
TRUNCATE = 3.0


def _blur_kernel():
    sigma_cells = np.sqrt(1.0 - CELL**2 / 3.0) / CELL
    radius = int(np.ceil(TRUNCATE * sigma_cells))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2.0 * sigma_cells**2))
    return k * (np.sqrt(2.0 * np.pi) / CELL / k.sum())


def bilateral_filter(values, coords):
    """Filter values (C, N) living at coords (N, D), bandwidth-scaled.

    Returns a (C, N) array approximating the all-pairs Gaussian sum above.
    """
    values = np.asarray(values, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    n_pts, ndim = coords.shape
    if values.shape[1] != n_pts:
        raise ValueError(f"values {values.shape} do not match coords {coords.shape}")

    kernel = _blur_kernel()
    pad = (len(kernel) - 1) // 2

    scaled = coords / CELL
    lo = np.floor(scaled.min(axis=0))
    # grid coordinates of each point, offset so blur padding stays in range
    pos = scaled - lo + pad
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    dims = base.max(axis=0) + 2 + pad  # room for the +1 corner and padding

    strides = np.ones(ndim, dtype=np.int64)
    for d in range(ndim - 2, -1, -1):
        strides[d] = strides[d + 1] * dims[d + 1]
    grid_size = int(strides[0] * dims[0])

    base_flat = base @ strides
    grid = np.zeros((values.shape[0], grid_size))
    out = np.zeros_like(values)

    corners = []
    for mask in range(2**ndim):
        bits = np.array([(mask >> d) & 1 for d in range(ndim)], dtype=np.int64)
        weight = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
        idx = base_flat + bits @ strides
        corners.append((idx, weight))

    for idx, weight in corners:
        for c in range(values.shape[0]):
            grid[c] += np.bincount(idx, weights=weight * values[c], minlength=grid_size)

    grid = grid.reshape((values.shape[0],) + tuple(dims))
    for axis in range(ndim):
        grid = convolve1d(grid, kernel, axis=axis + 1, mode="constant")
    grid = grid.reshape(values.shape[0], grid_size)

    for idx, weight in corners:
        out += weight * grid[:, idx]
    return out
