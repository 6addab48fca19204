"""Ring, hierarchical and 2D-torus all-reduce as per-rank schedules.

Each schedule is a generator: it sends directly through the endpoint
(sends are buffered and never block) and *yields* a :class:`Recv` request
whenever it needs a message.  A driver feeds the matching
:class:`~torus2d.transport.WireMessage` back in.  :func:`run_blocking`
serves one rank by blocking on the endpoint (threads, TCP);
:func:`run_rounds` advances all ranks of an in-process fabric from a
single thread in a fixed order.

All collectives compute the elementwise SUM.  Averaging is the caller's
division after the collective.

Payloads travel in ``policy.wire_dtype``; local accumulation happens in
``policy.accum_dtype``.  Before a chunk is gathered or broadcast, its owner
rounds it to the wire dtype so every rank ends with bit-identical values.
"""

from __future__ import annotations

from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass
from typing import Callable, Generator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .topology import ChunkRange, GridTopology, near_square_grid, partition_chunks
from .transport import InprocFabric, WireMessage, dtype_code

ALGORITHMS = ("ring", "hier", "torus")

# Phase codes on the wire.  A multi-phase collective numbers its steps
# independently inside each phase.
PHASE_RING = 0
PHASE_TORUS_RS, PHASE_TORUS_VERTICAL, PHASE_TORUS_AG = 0, 1, 2
PHASE_HIER_REDUCE, PHASE_HIER_LEADERS, PHASE_HIER_BCAST = 0, 1, 2


class Recv(NamedTuple):
    src: int
    collective_id: int
    phase: int
    step: int


Schedule = Generator[Recv, WireMessage, object]


class CollectiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReductionPolicy:
    wire_dtype: np.dtype
    accum_dtype: np.dtype

    def __post_init__(self):
        wire, accum = np.dtype(self.wire_dtype), np.dtype(self.accum_dtype)
        for dt in (wire, accum):
            dtype_code(dt)
        if accum.itemsize < wire.itemsize:
            raise ValueError(f"accum dtype {accum} is narrower than wire dtype {wire}")
        object.__setattr__(self, "wire_dtype", wire)
        object.__setattr__(self, "accum_dtype", accum)

    @classmethod
    def of(cls, wire: str, accum: Optional[str] = None) -> "ReductionPolicy":
        return cls(np.dtype(DTYPE_NAMES[wire]), np.dtype(DTYPE_NAMES[accum or wire]))


DTYPE_NAMES = {"f16": "float16", "f32": "float32", "f64": "float64"}

F32 = ReductionPolicy(np.float32, np.float32)
F64 = ReductionPolicy(np.float64, np.float64)
MIXED = ReductionPolicy(np.float16, np.float32)


def elementwise_reduce(acc: np.ndarray, incoming: bytes, policy: ReductionPolicy) -> np.ndarray:
    """``acc += incoming`` in place, decoding ``incoming`` as wire dtype."""
    if acc.dtype != policy.accum_dtype:
        raise TypeError(f"accumulator is {acc.dtype}, policy expects {policy.accum_dtype}")
    wire = policy.wire_dtype.newbyteorder("<")
    if len(incoming) % wire.itemsize:
        raise ValueError(f"{len(incoming)} payload bytes is not a whole number of {wire}")
    values = np.frombuffer(incoming, dtype=wire)
    if values.shape[0] != acc.shape[0]:
        raise ValueError(f"length mismatch: acc has {acc.shape[0]}, payload has {values.shape[0]}")
    np.add(acc, values.astype(policy.accum_dtype), out=acc)
    return acc


def _to_wire(values: np.ndarray, policy: ReductionPolicy) -> np.ndarray:
    return values.astype(policy.wire_dtype)


def _quantize(values: np.ndarray, policy: ReductionPolicy) -> None:
    if policy.wire_dtype != policy.accum_dtype:
        values[...] = values.astype(policy.wire_dtype)


def _message(ep, values, policy, cid, phase, step) -> WireMessage:
    return WireMessage.from_array(_to_wire(values, policy), collective_id=cid,
                                  phase=phase, step=step, src=ep.rank)


def _ring_position(ep, ring: Sequence[int]) -> int:
    try:
        return list(ring).index(ep.rank)
    except ValueError:
        raise CollectiveError(f"rank {ep.rank} is not a member of ring {list(ring)}") from None


def reduce_scatter_schedule(ep, ring: Sequence[int], buf: np.ndarray, policy: ReductionPolicy,
                            cid: int, phase: int, step0: int = 0) -> Schedule:
    """Ring reduce-scatter over ``buf`` (modified in place).

    Returns the chunk the rank owns: ring position ``p`` ends with the
    ring-wide sum of chunk ``p``.  At step ``s`` position ``p`` sends chunk
    ``(p - s - 1) mod R`` to its successor and folds chunk
    ``(p - s - 2) mod R`` received from its predecessor.
    """
    R = len(ring)
    p = _ring_position(ep, ring)
    chunks = partition_chunks(buf.shape[0], R)
    nxt, prv = ring[(p + 1) % R], ring[(p - 1) % R]
    for s in range(R - 1):
        out = chunks[(p - s - 1) % R]
        ep.send(nxt, _message(ep, buf[out.slice()], policy, cid, phase, step0 + s))
        msg = yield Recv(prv, cid, phase, step0 + s)
        into = chunks[(p - s - 2) % R]
        elementwise_reduce(buf[into.slice()], msg.payload, policy)
    return chunks[p]


def all_gather_schedule(ep, ring: Sequence[int], buf: np.ndarray, policy: ReductionPolicy,
                        cid: int, phase: int, step0: int = 0) -> Schedule:
    """Ring all-gather; position ``p`` starts out owning chunk ``p``.

    Pure data movement: received chunks are copied, never combined.
    """
    R = len(ring)
    p = _ring_position(ep, ring)
    chunks = partition_chunks(buf.shape[0], R)
    _quantize(buf[chunks[p].slice()], policy)
    nxt, prv = ring[(p + 1) % R], ring[(p - 1) % R]
    for s in range(R - 1):
        out = chunks[(p - s) % R]
        ep.send(nxt, _message(ep, buf[out.slice()], policy, cid, phase, step0 + s))
        msg = yield Recv(prv, cid, phase, step0 + s)
        into = chunks[(p - s - 1) % R]
        buf[into.slice()] = msg.to_array()
    return buf


def ring_all_reduce_schedule(ep, ring: Sequence[int], buf: np.ndarray, policy: ReductionPolicy,
                             cid: int, phase: int = PHASE_RING) -> Schedule:
    R = len(ring)
    yield from reduce_scatter_schedule(ep, ring, buf, policy, cid, phase, 0)
    yield from all_gather_schedule(ep, ring, buf, policy, cid, phase, R - 1)
    return buf


def torus_all_reduce_schedule(ep, t: GridTopology, buf: np.ndarray, policy: ReductionPolicy,
                              cid: int) -> Schedule:
    """Horizontal reduce-scatter, vertical all-reduce of the owned chunk,
    horizontal all-gather."""
    row = t.row_ring(ep.rank)
    owned = yield from reduce_scatter_schedule(ep, row, buf, policy, cid, PHASE_TORUS_RS)
    column = t.column_ring(ep.rank)
    yield from ring_all_reduce_schedule(ep, column, buf[owned.slice()], policy, cid,
                                        PHASE_TORUS_VERTICAL)
    yield from all_gather_schedule(ep, row, buf, policy, cid, PHASE_TORUS_AG)
    return buf


def hierarchical_all_reduce_schedule(ep, t: GridTopology, buf: np.ndarray,
                                     policy: ReductionPolicy, cid: int) -> Schedule:
    """Leader-based baseline: each row reduces its full buffer to column 0,
    the column-0 leaders ring all-reduce, then each row broadcasts from its
    leader.

    The row reduce walks the ring 1 -> 2 -> ... -> x-1 -> 0; the broadcast
    walks 0 -> 1 -> ... -> x-1.  Both take ``x - 1`` sequential steps.
    """
    row = t.row_ring(ep.rank)
    X = len(row)
    col = row.index(ep.rank)

    # row reduce toward the leader
    if X > 1:
        if col >= 2:
            msg = yield Recv(row[col - 1], cid, PHASE_HIER_REDUCE, col - 2)
            elementwise_reduce(buf, msg.payload, policy)
        if col >= 1:
            ep.send(row[(col + 1) % X], _message(ep, buf, policy, cid, PHASE_HIER_REDUCE, col - 1))
        else:
            msg = yield Recv(row[X - 1], cid, PHASE_HIER_REDUCE, X - 2)
            elementwise_reduce(buf, msg.payload, policy)

    if col == 0:
        leaders = [r * t.x for r in range(t.y)]
        yield from ring_all_reduce_schedule(ep, leaders, buf, policy, cid, PHASE_HIER_LEADERS)
        _quantize(buf, policy)

    # broadcast from the leader along the row
    if X > 1:
        if col >= 1:
            msg = yield Recv(row[col - 1], cid, PHASE_HIER_BCAST, col - 1)
            buf[:] = msg.to_array()
        if col < X - 1:
            ep.send(row[col + 1], _message(ep, buf, policy, cid, PHASE_HIER_BCAST, col))
    return buf


def _work_copy(buf: np.ndarray, policy: ReductionPolicy) -> np.ndarray:
    buf = np.asarray(buf)
    if buf.ndim != 1:
        raise ValueError(f"expected a flat buffer, got shape {buf.shape}")
    return np.array(buf, dtype=policy.accum_dtype, copy=True)


def schedule_for(algorithm: str, ep, buf: np.ndarray, *, topology: Optional[GridTopology] = None,
                 policy: ReductionPolicy = F32, collective_id: Optional[int] = None) -> Schedule:
    """Build the schedule for one rank's part of an all-reduce.

    The returned generator works on a private copy of ``buf`` in the
    accumulation dtype and returns it when done.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    if topology is None:
        topology = near_square_grid(ep.n_ranks)
    if topology.n_ranks != ep.n_ranks:
        raise CollectiveError(f"topology {topology} has {topology.n_ranks} ranks, fabric has {ep.n_ranks}")
    cid = ep.new_collective_id() if collective_id is None else collective_id
    work = _work_copy(buf, policy)
    if algorithm == "ring":
        return ring_all_reduce_schedule(ep, list(range(ep.n_ranks)), work, policy, cid)
    if algorithm == "torus":
        return torus_all_reduce_schedule(ep, topology, work, policy, cid)
    return hierarchical_all_reduce_schedule(ep, topology, work, policy, cid)


def run_blocking(schedule: Schedule, ep, timeout: Optional[float] = None):
    """Drive one rank's schedule by blocking on its endpoint."""
    try:
        request = next(schedule)
        while True:
            request = schedule.send(ep.recv(*request, timeout=timeout))
    except StopIteration as stop:
        return stop.value


def run_rounds(endpoints, schedules: Sequence[Schedule]) -> list:
    """Advance every rank's schedule from one thread, rank 0 first, until all
    finish.  Fully deterministic; raises on deadlock."""
    results: list = [None] * len(schedules)
    pending: List[Optional[Recv]] = [None] * len(schedules)
    alive = set()
    for r, sched in enumerate(schedules):
        try:
            pending[r] = next(sched)
            alive.add(r)
        except StopIteration as stop:
            results[r] = stop.value
    while alive:
        progressed = False
        for r in sorted(alive):
            sched, ep = schedules[r], endpoints[r]
            while True:
                msg = ep.try_recv(*pending[r])
                if msg is None:
                    break
                progressed = True
                try:
                    pending[r] = sched.send(msg)
                except StopIteration as stop:
                    results[r] = stop.value
                    alive.discard(r)
                    break
        if not progressed and alive:
            waiting = {r: tuple(pending[r]) for r in sorted(alive)}
            raise CollectiveError(f"deadlock: ranks blocked on {waiting}")
    return results


def run_threads(endpoints, fn: Callable, timeout: Optional[float] = None) -> list:
    """Run ``fn(ep)`` for every endpoint on its own thread and collect results.

    If any rank raises, the fabric is closed so the others stop waiting,
    and the first error is re-raised.
    """
    with ThreadPoolExecutor(max_workers=len(endpoints)) as pool:
        futures = [pool.submit(fn, ep) for ep in endpoints]
        done, not_done = wait(futures, timeout=timeout, return_when=FIRST_EXCEPTION)
        failed = [f for f in futures if f in done and f.exception() is not None]
        if failed or not_done:
            for fabric in {id(ep.fabric): ep.fabric for ep in endpoints}.values():
                fabric.close()
    if failed:
        raise failed[0].exception()
    if not_done:
        raise CollectiveError(f"{len(not_done)} ranks did not finish within {timeout}s")
    return [f.result() for f in futures]


def all_reduce(ep, buf: np.ndarray, algorithm: str = "torus", *,
               topology: Optional[GridTopology] = None, policy: ReductionPolicy = F32,
               collective_id: Optional[int] = None, timeout: Optional[float] = None) -> np.ndarray:
    """Blocking all-reduce for one rank; returns a new array in ``policy.accum_dtype``."""
    sched = schedule_for(algorithm, ep, buf, topology=topology, policy=policy,
                         collective_id=collective_id)
    return run_blocking(sched, ep, timeout)


def ring_reduce_scatter(ep, ring: Sequence[int], buf: np.ndarray, policy: ReductionPolicy = F32,
                        collective_id: Optional[int] = None,
                        timeout: Optional[float] = None) -> Tuple[ChunkRange, np.ndarray]:
    work = _work_copy(buf, policy)
    cid = ep.new_collective_id() if collective_id is None else collective_id
    owned = run_blocking(reduce_scatter_schedule(ep, ring, work, policy, cid, PHASE_RING), ep, timeout)
    return owned, work


def ring_all_gather(ep, ring: Sequence[int], buf: np.ndarray, owned_chunk: Optional[ChunkRange] = None,
                    policy: ReductionPolicy = F32, collective_id: Optional[int] = None,
                    timeout: Optional[float] = None) -> np.ndarray:
    """All-gather where ring position ``p`` contributes chunk ``p`` of ``buf``.

    ``owned_chunk``, when given, must be that chunk; it is checked, not used
    to pick a different one.
    """
    work = _work_copy(buf, policy)
    p = _ring_position(ep, ring)
    if owned_chunk is not None and tuple(owned_chunk) != tuple(partition_chunks(work.shape[0], len(ring))[p]):
        raise CollectiveError(f"rank {ep.rank} at ring position {p} cannot own chunk {owned_chunk}")
    cid = ep.new_collective_id() if collective_id is None else collective_id
    return run_blocking(all_gather_schedule(ep, ring, work, policy, cid, PHASE_RING), ep, timeout)


def ring_all_reduce(ep, ring: Sequence[int], buf: np.ndarray, policy: ReductionPolicy = F32,
                    collective_id: Optional[int] = None, timeout: Optional[float] = None) -> np.ndarray:
    work = _work_copy(buf, policy)
    cid = ep.new_collective_id() if collective_id is None else collective_id
    return run_blocking(ring_all_reduce_schedule(ep, ring, work, policy, cid), ep, timeout)


def torus_all_reduce(ep, t: GridTopology, buf: np.ndarray, policy: ReductionPolicy = F32,
                     collective_id: Optional[int] = None, timeout: Optional[float] = None) -> np.ndarray:
    return all_reduce(ep, buf, "torus", topology=t, policy=policy,
                      collective_id=collective_id, timeout=timeout)


def hierarchical_all_reduce(ep, t: GridTopology, buf: np.ndarray, policy: ReductionPolicy = F32,
                            collective_id: Optional[int] = None,
                            timeout: Optional[float] = None) -> np.ndarray:
    return all_reduce(ep, buf, "hier", topology=t, policy=policy,
                      collective_id=collective_id, timeout=timeout)


def simulate_all_reduce(buffers: Sequence[np.ndarray], algorithm: str = "torus", *,
                        topology: Optional[GridTopology] = None, policy: ReductionPolicy = F32,
                        mode: str = "rounds", fabric: Optional[InprocFabric] = None,
                        **fabric_kwargs) -> Tuple[List[np.ndarray], InprocFabric]:
    """All-reduce ``buffers[r]`` across an in-process fabric, one buffer per rank.

    ``mode="rounds"`` runs single-threaded and deterministic;
    ``mode="threads"`` gives every rank its own thread.  Returns the per-rank
    outputs and the fabric, whose :attr:`~InprocFabric.log` records every send.
    """
    n = len(buffers)
    if fabric is None:
        fabric = InprocFabric(n, **fabric_kwargs)
    elif fabric.n_ranks != n:
        raise CollectiveError(f"fabric has {fabric.n_ranks} ranks, got {n} buffers")
    lengths = {np.asarray(b).shape for b in buffers}
    if len(lengths) != 1:
        raise CollectiveError(f"ranks passed buffers of differing shapes {sorted(lengths)}")
    if mode == "rounds":
        schedules = [schedule_for(algorithm, ep, buf, topology=topology, policy=policy)
                     for ep, buf in zip(fabric.endpoints, buffers)]
        return run_rounds(fabric.endpoints, schedules), fabric
    if mode == "threads":
        outputs = run_threads(
            fabric.endpoints,
            lambda ep: all_reduce(ep, buffers[ep.rank], algorithm, topology=topology, policy=policy))
        return outputs, fabric
    raise ValueError(f"unknown mode {mode!r}")
