"""
Hand-written backpropagation vs finite differences
===================================================

"""

import numpy as np

from evcseg.evnet import ops
from evcseg.evnet.loss import soft_dice_loss

# every layer ships its own backward pass; central finite differences
# give an independent numerical derivative to compare against
rng = np.random.default_rng(7)


def fd_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


# a 3x3x3 convolution: project the output onto a fixed random direction so
# the objective is scalar, then compare analytic and numeric input gradients
x = rng.standard_normal((1, 2, 5, 5, 5))
k = rng.standard_normal((3, 2, 3, 3, 3)) * 0.3
b = rng.standard_normal(3) * 0.1
y, cache = ops.conv3d_forward(x, k, b, stride=1, padding=1)
r = rng.standard_normal(y.shape)
gx, gk, gb = ops.conv3d_backward(r, cache)
print("conv3d input grad rel err:",
      f"{rel_err(fd_grad(lambda t: (ops.conv3d_forward(t, k, b, 1, 1)[0] * r).sum(), x), gx):.2e}")
print("conv3d kernel grad rel err:",
      f"{rel_err(fd_grad(lambda t: (ops.conv3d_forward(x, t, b, 1, 1)[0] * r).sum(), k), gk):.2e}")

# the loss gradient closes the chain: soft dice is smooth in the predicted
# foreground probabilities, so the same check applies end to end
pred = rng.uniform(0.05, 0.95, size=(1, 2, 4, 4, 4))
truth = (rng.uniform(size=(1, 4, 4, 4)) > 0.5).astype(float)
_, grad = soft_dice_loss(pred, truth)
num = fd_grad(lambda t: soft_dice_loss(t, truth)[0].value, pred)
print("soft dice grad rel err:", f"{rel_err(num, grad):.2e}")
