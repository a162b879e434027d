"""
From heatmap to coordinate with soft-argmax
===========================================

A softmax over every voxel turns a heatmap into a probability mass; its
expected (x, y, z) position is a differentiable stand-in for argmax.
"""
import numpy as np

from vertlabel.autograd import Tensor
from vertlabel.integral import hard_argmax, normalize_heatmap, soft_argmax

shape = (12, 10, 10)  # D, H, W
z, y, x = np.meshgrid(*(np.arange(n) for n in shape), indexing="ij")

# a Gaussian bump centred between voxels, at x=6.3, y=4.5, z=7.25
centre = np.array([6.3, 4.5, 7.25])
logits = -((x - centre[0]) ** 2 + (y - centre[1]) ** 2 + (z - centre[2]) ** 2) / 2.0
heat = Tensor(logits[None])

print("true centre     ", centre)
print("hard argmax     ", hard_argmax(heat).data[0])
print("soft-argmax     ", soft_argmax(heat).data[0].round(4))

# adding a constant changes nothing: softmax is shift invariant
print("shifted by +300 ", soft_argmax(Tensor(logits[None] + 300)).data[0].round(4))

# flat logits spread the mass evenly, so the estimate falls at the grid centre
print("flat heatmap    ", soft_argmax(Tensor(np.zeros((1,) + shape))).data[0])

# scaling the logits up sharpens the mass until soft-argmax meets hard argmax
noisy = logits + np.random.default_rng(1).normal(0, 0.5, size=shape)
for t in (0.1, 1, 10, 100):
    p = normalize_heatmap(Tensor(noisy[None] * t)).data
    print(f"temperature x{t:<5} peak mass {p.max():.3f}  coord {soft_argmax(Tensor(noisy[None] * t)).data[0].round(3)}")
