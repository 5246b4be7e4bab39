"""Reverse-mode autodiff on the bundled tensor core.

Builds a small computation graph, reads gradients off the tape, and
confirms them against central finite differences.
"""

import numpy as np

from shiftlab import tensor as T
from shiftlab.tensor import GradTape, Tensor, finite_difference_check

rng = np.random.default_rng(0)

# d/dx sum((x @ w + b)^2) with a relu in the middle; leaves we want
# gradients for are marked requires_grad (ops on unmarked tensors are not
# recorded at all)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
b = Tensor(np.array([0.5, 0.5]), requires_grad=True)

with GradTape() as tape:
    h = T.relu(T.add(T.matmul(x, w), b))
    loss = T.tsum(T.mul(h, h))

grads = tape.gradients(loss, {"x": x, "w": w, "b": b})
print("loss        :", round(loss.item(), 6))
print("dloss/dw    :\n", np.round(grads["w"], 4))
print("dloss/db    :", np.round(grads["b"], 4))

# the same gradient, measured numerically
err = finite_difference_check(
    lambda ww: T.tsum(T.mul(T.relu(T.add(T.matmul(x, ww), b)),
                            T.relu(T.add(T.matmul(x, ww), b)))),
    w,
)
print("max relative error vs finite differences:", f"{err:.2e}")

# gradients flow through the image ops too; read the normalized activations
# out with random weights (a plain mean of group_norm output is zero by
# construction, so its gradient would vanish)
img = Tensor(rng.normal(size=(1, 2, 6, 6)))
kern = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
readout = Tensor(rng.normal(size=(1, 3, 6, 6)))
with GradTape() as tape:
    y = T.conv2d(img, T.weight_standardize(kern), stride=1, padding=1)
    y = T.group_norm(y, Tensor(np.ones(3)), Tensor(np.zeros(3)), groups=1)
    score = T.tsum(T.mul(y, readout))
g = tape.gradients(score, {"kern": kern})["kern"]
print("conv kernel gradient shape:", g.shape, "norm:", f"{np.linalg.norm(g):.4f}")
