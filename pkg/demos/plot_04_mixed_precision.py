"""
Half-precision wire, single-precision sums
==========================================

Payloads travel as float16 while every partial sum is kept in float32.
"""

import numpy as np

from torus2d import GridTopology, ReductionPolicy, simulate_all_reduce

rng = np.random.default_rng(0)
grid = GridTopology(16, 4, 4)
grads = rng.uniform(-1, 1, size=(16, 4096)).astype(np.float16)
exact = grads.astype(np.float64).sum(axis=0)

for label, policy in [("f16 wire / f16 sum", ReductionPolicy(np.float16, np.float16)),
                      ("f16 wire / f32 sum", ReductionPolicy(np.float16, np.float32))]:
    out, _ = simulate_all_reduce(list(grads), "torus", topology=grid, policy=policy)
    print(f"{label}: mean abs error {np.mean(np.abs(out[0] - exact)):.2e}")
