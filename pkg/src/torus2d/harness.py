"""Verification, benchmark, cost and schedule commands behind the CLI.

Every ``cmd_*`` returns a JSON-serialisable report plus an exit status
(0 pass, 1 verification/tolerance failure).  Config and transport errors
are raised and mapped to exit codes by :mod:`torus2d.cli`.
"""

from __future__ import annotations

import statistics
import threading
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import costmodel
from .collectives import (ALGORITHMS, ReductionPolicy, all_reduce, run_threads,
                          simulate_all_reduce)
from .costmodel import LinkModel, measured_report, same_shape, sends_per_rank, trace
from .largebatch import get_schedule
from .topology import PRESET_GRIDS, GridTopology, factorizations, near_square_grid
from .trainsim import TrainSimSpec, run_trainsim
from .transport import InprocFabric, TcpEndpoint, flip_first_payload_byte

TOLERANCE = {"f16": 1e-2, "f32": 1e-5, "f64": 1e-12}


def _scale(inputs: np.ndarray) -> np.ndarray:
    return np.maximum(np.abs(inputs.astype(np.float64)).sum(axis=0), np.finfo(np.float64).tiny)


def _disagreement(a: np.ndarray, b: np.ndarray, inputs: np.ndarray) -> float:
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64)) / _scale(inputs)
    return float(np.max(diff)) if np.all(np.isfinite(diff)) else float("inf")


def relative_error(outputs: Sequence[np.ndarray], inputs: np.ndarray) -> float:
    """Worst elementwise ``|out - oracle| / sum_r |x_r|`` over all ranks.

    ``oracle`` is the float64 sequential sum over ranks.  The denominator is
    the usual summation error scale; for nonnegative inputs it is the plain
    relative error.  NaN/inf outputs count as infinite error.
    """
    exact = np.zeros(inputs.shape[1], dtype=np.float64)
    for row in inputs.astype(np.float64):
        exact += row
    scale = _scale(inputs)
    worst = 0.0
    for out in outputs:
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            return float("inf")
        worst = max(worst, float(np.max(np.abs(out - exact) / scale)))
    return worst


@dataclass
class VerifyConfig:
    ranks: Sequence[int] = (1, 2, 4, 8, 16)
    lengths: Sequence[int] = (1, 7, 64, 1000)
    dtypes: Sequence[str] = ("f32", "f64")
    algorithms: Sequence[str] = ALGORITHMS
    grids: Optional[Sequence[GridTopology]] = None  # overrides ranks
    seed: int = 0
    fault: bool = False


def _case_inputs(seed: int, n: int, length: int, dtype: str) -> np.ndarray:
    rng = np.random.default_rng([seed, n, length, ["f16", "f32", "f64"].index(dtype)])
    return rng.random((n, length)).astype(ReductionPolicy.of(dtype).wire_dtype)


def _verify_case(name: str, inputs: np.ndarray, algorithm: str, t: GridTopology, dtype: str,
                 fault: bool, expected: Optional[np.ndarray] = None) -> Tuple[dict, List[np.ndarray]]:
    policy = ReductionPolicy.of(dtype)
    fabric = InprocFabric(t.n_ranks, fault=flip_first_payload_byte() if fault else None)
    outputs, fabric = simulate_all_reduce(list(inputs), algorithm, topology=t, policy=policy,
                                          fabric=fabric)
    err = relative_error(outputs, inputs)
    if expected is not None:
        err = max(err, max(float(np.max(np.abs(o - expected))) for o in outputs))
    identical = all(np.array_equal(outputs[0], o) for o in outputs[1:])
    predicted = trace(algorithm, t, inputs.shape[1], policy.wire_dtype.itemsize)
    measured = measured_report(fabric.log, algorithm, t)
    trace_ok = same_shape(predicted, measured)
    if algorithm in ("ring", "torus"):
        trace_ok = trace_ok and all(c == predicted.total_steps
                                    for c in sends_per_rank(fabric.log, t.n_ranks))
    passed = err <= TOLERANCE[dtype] and identical and trace_ok
    return {
        "case": name, "algorithm": algorithm, "n": t.n_ranks, "x": t.x, "y": t.y,
        "length": int(inputs.shape[1]), "dtype": dtype, "max_rel_err": err,
        "ranks_identical": identical, "trace_steps": predicted.total_steps,
        "measured_steps": measured.total_steps, "trace_ok": trace_ok, "passed": passed,
    }, outputs


def cmd_verify(cfg: VerifyConfig = VerifyConfig()) -> Tuple[dict, int]:
    """Run every algorithm over the (N, grid, length, dtype) matrix on the
    in-process fabric and compare against the float64 oracle, against each
    other, and against the cost-model trace."""
    cases = []
    grids = list(cfg.grids) if cfg.grids else [t for n in cfg.ranks for t in factorizations(n)]

    # four ranks on a 2x2 grid, rank r contributing r everywhere
    fig2 = np.array([[r] * 4 for r in range(4)], dtype=np.float32)
    for alg in cfg.algorithms:
        case, _ = _verify_case("grid-2x2-example", fig2, alg, GridTopology(4, 2, 2), "f32",
                               cfg.fault, expected=np.full(4, 6.0))
        cases.append(case)

    ring_done = set()
    for t in grids:
        for length in cfg.lengths:
            for dtype in cfg.dtypes:
                inputs = _case_inputs(cfg.seed, t.n_ranks, length, dtype)
                outputs = {}
                for alg in cfg.algorithms:
                    if alg == "ring" and (t.n_ranks, length, dtype) in ring_done:
                        continue
                    case, outputs[alg] = _verify_case("matrix", inputs, alg, t, dtype, cfg.fault)
                    if alg == "ring":
                        ring_done.add((t.n_ranks, length, dtype))
                    cases.append(case)
                # cross-algorithm agreement on identical inputs
                algs = sorted(outputs)
                for first, second in zip(algs, algs[1:]):
                    agree = _disagreement(outputs[first][0], outputs[second][0], inputs)
                    cases.append({
                        "case": "agreement", "algorithm": f"{first}/{second}", "n": t.n_ranks,
                        "x": t.x, "y": t.y, "length": length, "dtype": dtype,
                        "max_rel_err": agree, "passed": agree <= 2 * TOLERANCE[dtype],
                    })
    failed = [c for c in cases if not c["passed"]]
    report = {"command": "verify", "fault_injected": cfg.fault, "cases": cases,
              "total": len(cases), "failed": len(failed), "passed": not failed}
    return report, 0 if not failed else 1


@dataclass
class BenchConfig:
    n_ranks: int = 16
    grid: Optional[GridTopology] = None
    algorithms: Sequence[str] = ("ring", "torus")
    size: int = 1 << 16
    wire_dtype: str = "f32"
    accum_dtype: Optional[str] = None
    alpha: float = 0.0
    beta: float = 10e9
    iters: int = 10
    warmup: int = 2
    seed: int = 0
    transport: str = "inproc"
    rank: Optional[int] = None
    peers: Optional[Dict[int, Tuple[str, int]]] = None
    timeout: float = 30.0

    @property
    def topology(self) -> GridTopology:
        return self.grid or near_square_grid(self.n_ranks)

    @property
    def policy(self) -> ReductionPolicy:
        return ReductionPolicy.of(self.wire_dtype, self.accum_dtype)


def _bench_row(cfg: BenchConfig, algorithm: str, times: List[float], measured_steps: int) -> dict:
    t = cfg.topology
    policy = cfg.policy
    nbytes = cfg.size * policy.wire_dtype.itemsize
    predicted = trace(algorithm, t, cfg.size, policy.wire_dtype.itemsize)
    median = statistics.median(times)
    bus = nbytes / median * 2 * (t.n_ranks - 1) / t.n_ranks / 1e9 if median > 0 else 0.0
    return {
        "algo": algorithm, "n": t.n_ranks, "x": t.x, "y": t.y, "bytes": nbytes,
        "min_s": min(times), "median_s": median, "bus_GBps": bus,
        "measured_steps": measured_steps, "trace_steps": predicted.total_steps,
        "predicted_s": costmodel.predict_time(predicted, LinkModel(cfg.alpha, cfg.beta)),
        "iters": len(times),
    }


def _bench_inproc(cfg: BenchConfig, algorithm: str) -> dict:
    t = cfg.topology
    rng = np.random.default_rng(cfg.seed)
    inputs = rng.random((t.n_ranks, cfg.size)).astype(cfg.policy.wire_dtype)
    fabric = InprocFabric(t.n_ranks, latency=cfg.alpha)
    barrier = threading.Barrier(t.n_ranks)
    total = cfg.warmup + cfg.iters
    times: List[float] = []

    def worker(ep):
        cids = []
        for i in range(total):
            barrier.wait()
            start = time.perf_counter()
            cid = ep.new_collective_id()
            all_reduce(ep, inputs[ep.rank], algorithm, topology=t, policy=cfg.policy,
                       collective_id=cid)
            barrier.wait()
            if ep.rank == 0 and i >= cfg.warmup:
                times.append(time.perf_counter() - start)
            cids.append(cid)
        return cids

    cids = run_threads(fabric.endpoints, worker, timeout=max(cfg.timeout, 1.0) * total)
    measured = measured_report(fabric.log, algorithm, t, collective_id=cids[0][-1])
    return _bench_row(cfg, algorithm, times, measured.total_steps)


def _bench_tcp(cfg: BenchConfig, algorithm: str, ep: TcpEndpoint) -> dict:
    t = cfg.topology
    rng = np.random.default_rng([cfg.seed, ep.rank])
    buf = rng.random(cfg.size).astype(cfg.policy.wire_dtype)
    token = np.zeros(1, dtype=np.float32)
    times = []
    sent = 0
    for i in range(cfg.warmup + cfg.iters):
        # one-element ring all-reduce as a cross-process barrier
        all_reduce(ep, token, "ring", topology=t, timeout=cfg.timeout)
        before = len(ep.log)
        start = time.perf_counter()
        all_reduce(ep, buf, algorithm, topology=t, policy=cfg.policy, timeout=cfg.timeout)
        if i >= cfg.warmup:
            times.append(time.perf_counter() - start)
        sent = len(ep.log) - before
    all_reduce(ep, token, "ring", topology=t, timeout=cfg.timeout)
    return _bench_row(cfg, algorithm, times, sent)


def cmd_bench(cfg: BenchConfig) -> Tuple[dict, int]:
    """Time all-reduce iterations (warmup excluded) and report them next to
    the cost-model trace.

    On the in-process fabric ``alpha`` is injected as a per-message delay
    and ``measured_steps`` is the critical-path step count of the last
    collective.  Over TCP, ``measured_steps`` is the number of messages this
    rank sent during the last collective.
    """
    if cfg.iters < 1 or cfg.warmup < 0:
        raise ValueError("iters must be >= 1 and warmup >= 0")
    rows = []
    if cfg.transport == "inproc":
        for alg in cfg.algorithms:
            rows.append(_bench_inproc(cfg, alg))
    elif cfg.transport == "tcp":
        if cfg.peers is None or cfg.rank is None:
            raise ValueError("tcp transport needs --rank and --peers")
        with TcpEndpoint(cfg.rank, cfg.peers, timeout=cfg.timeout) as ep:
            for alg in cfg.algorithms:
                rows.append(_bench_tcp(cfg, alg, ep))
    else:
        raise ValueError(f"unknown transport {cfg.transport!r}")
    ok = all(r["measured_steps"] == r["trace_steps"] for r in rows) if cfg.transport == "inproc" else True
    return {"command": "bench", "transport": cfg.transport, "rows": rows}, 0 if ok else 1


@dataclass
class CostConfig:
    grids: Sequence[GridTopology] = PRESET_GRIDS
    size: int = 51_000_000
    element_bytes: int = 2
    algorithms: Sequence[str] = ALGORITHMS
    link: LinkModel = costmodel.DOCUMENTED_LINK


def cmd_cost(cfg: CostConfig = CostConfig()) -> Tuple[dict, int]:
    reports = costmodel.sweep(cfg.grids, cfg.size, cfg.element_bytes, cfg.algorithms)
    rows = [row for r in reports for row in r.rows(cfg.link)]
    summary = [dict(r.to_dict(cfg.link), horizontal_steps=r.horizontal_steps,
                    vertical_steps=r.vertical_steps) for r in reports]
    return {"command": "cost", "alpha": cfg.link.alpha, "beta": cfg.link.beta,
            "payload_elements": cfg.size, "element_bytes": cfg.element_bytes,
            "reports": summary, "rows": rows}, 0


def cmd_schedule(name: str = "exp2", epoch_step: float = 1.0) -> Tuple[dict, int]:
    schedule = get_schedule(name)
    return {"command": "schedule", "schedule": schedule.to_dict(),
            "rows": schedule.table(epoch_step)}, 0


def cmd_trainsim(spec: TrainSimSpec) -> Tuple[dict, int]:
    report = run_trainsim(spec)
    rows = [{"step": i, "rel_divergence": d} for i, d in enumerate(report.divergence)]
    return dict(report.to_dict(), command="trainsim", rows=rows), 0 if report.passed else 1
