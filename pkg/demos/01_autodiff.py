"""
Reverse-mode autodiff on numpy arrays
=====================================

Tensors record the op that produced them. ``backward`` walks the graph in
reverse topological order and leaves a ``.grad`` on every leaf that asked
for one.
"""

import numpy as np

from auxmtl import tensor as T
from auxmtl.tensor import Tensor, backward, grad_check

# a scalar: d(x^2 + 3x)/dx at x = 2 is 2*2 + 3 = 7
x = Tensor(2.0, requires_grad=True)
backward(T.add(T.square(x), T.mul(x, 3.0)))
print("d/dx (x^2 + 3x) at 2 =", x.grad)

# broadcasting: gradients are summed back to the input shape
a = Tensor(np.ones((2, 3)), requires_grad=True)
b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
backward(T.sum_(T.mul(a, b)))
print("grad wrt the broadcast row:", b.grad)

# images are NHWC; kernels are (kh, kw, in, out)
rng = np.random.default_rng(0)
img = Tensor(rng.normal(size=(1, 8, 6, 3)), requires_grad=True)
kernel = Tensor(rng.normal(size=(3, 3, 3, 4)) * 0.2, requires_grad=True)
feat = T.relu(T.conv2d(img, kernel, padding=2, dilation=2))
print("dilated conv keeps the size:", feat.shape)

pooled = T.max_pool2d(feat, 3, 3)
print("3x3/3 pool with ceil mode:", pooled.shape)

up = T.upsample_bilinear(pooled, 4)
print("bilinear x4:", up.shape)

backward(T.mean(up))
print("kernel grad norm:", np.linalg.norm(kernel.grad))

# finite differences agree with the analytic gradient
w0 = rng.normal(size=(3, 3, 3, 4))
err = grad_check(lambda w: T.mean(T.square(T.conv2d(Tensor(img.data), w, padding=1))), w0, eps=1e-5)
print(f"conv2d max relative error vs central differences: {err:.1e}")
