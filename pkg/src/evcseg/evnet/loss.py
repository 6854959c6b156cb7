"""Soft-Dice loss on the foreground channel, with its analytic gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import GeometryError

EPS = 1e-7


@dataclass(frozen=True)
class LossReport:
    """Batch loss: `value` is the mean of `per_example`."""

    value: float
    per_example: np.ndarray


def soft_dice_loss(pred, truth):
    """1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps), averaged over the batch.

    Args:
        pred: (n, labels, d, h, w) probabilities; channel 1 is foreground.
        truth: (n, d, h, w) binary targets.

    Returns:
        (LossReport, grad) where grad has pred's shape; only the foreground
        channel carries gradient.
    """
    if pred.ndim != 5 or pred.shape[1] < 2:
        raise GeometryError(f"pred must be (n, labels >= 2, d, h, w), got {pred.shape}")
    if truth.shape != (pred.shape[0], *pred.shape[2:]):
        raise GeometryError(
            f"truth shape {truth.shape} does not match pred {pred.shape}"
        )
    n = pred.shape[0]
    p = pred[:, 1]
    g = truth.astype(p.dtype)

    axes = (1, 2, 3)
    inter = (p * g).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + EPS
    per_example = 1.0 - 2.0 * inter / denom

    # d/dp of (1 - 2I/D) = (4*I*p - 2*g*D) / D^2, then 1/n for the batch mean
    ish = inter.reshape(n, 1, 1, 1)
    dsh = denom.reshape(n, 1, 1, 1)
    grad_fg = (4.0 * ish * p - 2.0 * g * dsh) / (dsh * dsh) / n
    grad = np.zeros_like(pred)
    grad[:, 1] = grad_fg
    return LossReport(value=float(per_example.mean()), per_example=per_example), grad
