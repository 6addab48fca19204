"""
Summing gradients across a 2-D grid of ranks
============================================

Four ranks on a 2x2 grid each hold a vector. After a torus all-reduce
every rank holds the elementwise sum.
"""

import numpy as np

from torus2d import GridTopology, simulate_all_reduce

grid = GridTopology(4, 2, 2)
buffers = [np.full(4, float(r), dtype=np.float32) for r in range(4)]

for algorithm in ("ring", "hier", "torus"):
    outputs, fabric = simulate_all_reduce(buffers, algorithm, topology=grid)
    print(f"{algorithm:6s} rank 0 -> {outputs[0]}   messages sent: {len(fabric.log)}")

# Collectives return sums; divide for the mean gradient.
outputs, _ = simulate_all_reduce(buffers, "torus", topology=grid)
print("mean:", outputs[0] / grid.n_ranks)

# Row rings carry the horizontal phases, column rings the vertical one.
print("row of rank 3:", grid.row_ring(3), " column of rank 3:", grid.column_ring(3))
