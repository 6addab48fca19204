"""
LARS steps and label smoothing
==============================
"""

import numpy as np

from torus2d.largebatch import LarsConfig, lars_step, smooth_labels, smoothed_cross_entropy

rng = np.random.default_rng(1)
w = rng.normal(size=(64, 32))
g = rng.normal(size=(64, 32)) * 100

# Without weight decay and eps the step norm is lr * 0.01 * ||w||,
# whatever the gradient scale.
_, v = lars_step(w, g, np.zeros_like(w), 2.0, 0.0, LarsConfig(eps=0.0))
print(np.linalg.norm(v), 2.0 * 0.01 * np.linalg.norm(w))

q = smooth_labels(3, epsilon=0.1, num_classes=10)
print("target:", q.round(3))
loss, grad = smoothed_cross_entropy(rng.normal(size=10), q)
print(f"loss {loss:.4f}, gradient sums to {grad.sum():.1e}")
