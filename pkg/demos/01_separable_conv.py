"""Depthwise separable convolution against a standard one.

Builds both layer types on the same input, checks that the separable layer
is exactly pointwise(depthwise(x)), and compares parameter counts.

    python3 demos/01_separable_conv.py
"""
import numpy as np

from vrunet import ops
from vrunet.ops import Kernel

rng = np.random.default_rng(0)
x = rng.normal(size=(1, 32, 32, 16)).astype(np.float32)

# 3x3 depthwise over 16 channels, then 1x1 mixing into 32 channels
dk = Kernel("depthwise", rng.normal(size=(3, 3, 16)).astype(np.float32), np.zeros(16, np.float32))
pk = Kernel("pointwise", rng.normal(size=(1, 1, 16, 32)).astype(np.float32), np.zeros(32, np.float32))
std = Kernel("standard", rng.normal(size=(3, 3, 16, 32)).astype(np.float32), np.zeros(32, np.float32))

sep = ops.separable_forward(x, dk, pk)
two_step = ops.pointwise_forward(ops.depthwise_forward(x, dk), pk)
print("separable output", sep.shape, "bit-identical to the two-step version:", sep.tobytes() == two_step.tobytes())
print("standard output ", ops.conv2d_forward(x, std).shape)

n_sep = ops.param_count(dk) + ops.param_count(pk)
n_std = ops.param_count(std)
print(f"parameters: separable {n_sep}, standard {n_std} ({n_std / n_sep:.1f}x more)")

# stride 2 with "same" padding rounds the output size up
print("stride 2 on 33x33 ->", ops.conv2d_forward(np.zeros((1, 33, 33, 16), np.float32), std, 2).shape[1:3])
