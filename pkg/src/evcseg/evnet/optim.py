"""Plain SGD with classic momentum, as pure functions over parameter dicts."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, TrainingError


def sgd_step(params, grads, velocity, lr, momentum):
    """One momentum update: v' = momentum * v + g; p' = p - lr * v'.

    Args:
        params: name -> array.
        grads: name -> array, same keys and shapes.
        velocity: name -> array from the previous step, or None on the first.
        lr: learning rate.
        momentum: momentum coefficient (0 disables it).

    Returns:
        (new_params, new_velocity); inputs are left untouched.

    Raises:
        TrainingError: if any gradient entry is non-finite.
    """
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise TrainingError(f"gradient keys do not match parameters: {sorted(missing)}")
    new_params = {}
    new_velocity = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        v = momentum * velocity[name] + g if velocity is not None else g.copy()
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity
