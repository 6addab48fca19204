"""
The same collective over TCP sockets
====================================

Each rank gets a ``TcpEndpoint`` bound to localhost. Here the ranks run as
threads of one process; the CLI ``bench --transport tcp`` runs one
process per rank instead.
"""

import socket

import numpy as np

from torus2d import GridTopology
from torus2d.collectives import run_threads, torus_all_reduce
from torus2d.transport import TcpEndpoint


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


grid = GridTopology(4, 2, 2)
peers = {r: ("127.0.0.1", free_port()) for r in range(grid.n_ranks)}
endpoints = [TcpEndpoint(r, peers, timeout=10) for r in range(grid.n_ranks)]
data = np.arange(8, dtype=np.float32)


def work(ep):
    return torus_all_reduce(ep, grid, data * (ep.rank + 1))


try:
    results = run_threads(endpoints, work, timeout=30)
finally:
    for ep in endpoints:
        ep.close()

print(results[0])  # (1+2+3+4) * data
print("bytes on the wire from rank 0:", sum(rec.nbytes for rec in endpoints[0].log))
