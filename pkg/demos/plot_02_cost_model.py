"""
Counting sequential steps with the alpha-beta model
===================================================

A flat ring needs 2(N-1) dependent steps; the torus needs 2(X-1) along
rows plus 2(Y-1) along columns.
"""

from torus2d.costmodel import DOCUMENTED_LINK, LinkModel, predict_time, scaling_model, trace
from torus2d.topology import PRESET_GRIDS

payload = 25_500_000  # f16 gradient elements
for grid in PRESET_GRIDS:
    ring = trace("ring", grid, payload, 2)
    torus = trace("torus", grid, payload, 2)
    print(f"{str(grid):>6}  ring steps {ring.total_steps:5d}  torus steps {torus.total_steps:4d}"
          f"  ring {predict_time(ring, DOCUMENTED_LINK) * 1e3:7.1f} ms"
          f"  torus {predict_time(torus, DOCUMENTED_LINK) * 1e3:6.1f} ms")

# Latency-free links make the two equal up to chunk rounding.
grid = PRESET_GRIDS[0]
free = LinkModel(alpha=0.0, beta=DOCUMENTED_LINK.beta)
print("alpha=0:", predict_time(trace("ring", grid, payload, 2), free),
      predict_time(trace("torus", grid, payload, 2), free))

# Modelled scaling efficiency (no compute/communication overlap).
for n, ips, eff in scaling_model():
    print(f"{n:5d} GPUs  {ips:9.0f} img/s  efficiency {eff:.3f}")
