"""2D-torus all-reduce with ring and hierarchical baselines, an alpha-beta
cost model, and the large mini-batch training math that goes with them."""

from .collectives import (F32, F64, MIXED, ReductionPolicy, all_reduce, elementwise_reduce,
                          hierarchical_all_reduce, ring_all_gather, ring_all_reduce,
                          ring_reduce_scatter, simulate_all_reduce, torus_all_reduce)
from .costmodel import ClusterSpec, CostReport, LinkModel, predict_efficiency, predict_time, trace
from .topology import (ChunkRange, GridTopology, coords_of, grid_from_counts, parse_grid,
                       partition_chunks, ring_neighbors)
from .transport import (InprocFabric, TcpEndpoint, WireMessage, create_inproc_fabric,
                        decode_frame, encode_frame)

__version__ = "0.1.0"
