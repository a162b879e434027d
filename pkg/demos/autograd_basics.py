"""
Reverse-mode gradients on a tiny 3D network piece
=================================================

Build a convolution, group norm and ReLU by hand, backpropagate a scalar,
and compare the tape's gradients against central differences.
"""
import numpy as np

import vertlabel.autograd as ag
from vertlabel.autograd import Tensor

rng = np.random.default_rng(0)

# one input channel, a 6x6x6 volume, and four 3x3x3 filters
x = Tensor(rng.normal(size=(1, 6, 6, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 1, 3, 3, 3)) * 0.3, requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)


def forward():
    h = ag.conv3d(x, w, padding=1)
    h = ag.relu(ag.group_norm(h, 2, gamma, beta))
    return ag.mean(h * h)


loss = forward()
loss.backward()
print(f"loss = {loss.item():.6f}")
print("dL/dw shape:", w.grad.shape, " |dL/dw| =", np.linalg.norm(w.grad).round(6))

# the finite-difference route shares no code with backward()
errs = ag.check_gradients(forward, [x, w, gamma, beta])
for name, err in zip(["x", "w", "gamma", "beta"], errs.values()):
    print(f"relative error {name:>5}: {err:.2e}")

# inside no_grad nothing is recorded, so there is nothing to backpropagate
with ag.no_grad():
    print("requires_grad under no_grad:", forward().requires_grad)
