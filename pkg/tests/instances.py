"""Shared builders for refinement test instances."""

import numpy as np

from evcseg.crf import CrfConfig
from evcseg.volume import ProbMap, Volume


def sphere_mask(shape, center, radius):
    grids = np.indices(shape)
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return (d2 <= radius**2).astype(np.uint8)


def noisy_sphere_instance(seed=7):
    """12-cube sphere whose unary has 5% of voxels flipped.

    Returns (probmap, volume, clean truth, crf config): intensity tracks
    the true sphere with mild noise, the unary is confident but wrong at
    the flipped voxels, and the config uses intensity-guided kernels
    moderate enough that refinement has real work to do.
    """
    rng = np.random.default_rng(seed)
    shape = (12, 12, 12)
    truth = sphere_mask(shape, (6, 6, 6), 4)
    intensity = truth + rng.normal(0.0, 0.05, size=shape)
    fg = np.where(truth > 0, 0.9, 0.1)
    flip = rng.uniform(size=shape) < 0.05
    fg = np.where(flip, 1.0 - fg, fg)
    probs = np.stack([1.0 - fg, fg])
    cfg = CrfConfig(
        w_appearance=3.0,
        w_smoothness=1.0,
        theta_alpha=3.0,
        theta_beta=0.15,
        theta_gamma=1.5,
        iterations=5,
        backend="brute",
    )
    return ProbMap(probs), Volume(intensity), truth, cfg


def random_crf_instance(seed, max_side=12):
    """Random smooth unary + intensity on a random grid of side <= max_side.

    Kernel weights stay moderate so the marginals remain informative and
    backend disagreements cannot hide behind saturation.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(int(rng.integers(5, max_side + 1)) for _ in range(3))

    def smooth_field():
        f = rng.normal(size=shape)
        for axis in range(3):
            f = (f + np.roll(f, 1, axis) + np.roll(f, -1, axis)) / 3.0
        return f

    fg = 1.0 / (1.0 + np.exp(-3.0 * smooth_field()))
    fg = np.clip(fg, 0.02, 0.98)
    probs = np.stack([1.0 - fg, fg])
    intensity = smooth_field() + 0.2 * rng.normal(size=shape)
    # the Gaussian kernels integrate to tens of units at these bandwidths,
    # so weights an order of magnitude below 1 keep the total coupling on
    # the scale of the unary logits; far above that the mean-field map
    # turns bistable and every voxel rides a knife edge
    cfg = CrfConfig(
        w_appearance=float(rng.uniform(0.1, 0.25)),
        w_smoothness=float(rng.uniform(0.04, 0.1)),
        theta_alpha=float(rng.uniform(1.5, 2.5)),
        theta_beta=float(rng.uniform(0.12, 0.2)),
        theta_gamma=float(rng.uniform(1.0, 2.0)),
        iterations=5,
        backend="brute",
    )
    return ProbMap(probs), Volume(intensity), cfg
