"""Acceptance suite: twelve criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from torus2d.collectives import ReductionPolicy, simulate_all_reduce
from torus2d.costmodel import (DOCUMENTED_LINK, LinkModel, measured_report, predict_time,
                               same_shape, scaling_model, sends_per_rank, trace)
from torus2d.harness import BenchConfig, cmd_bench, cmd_trainsim, cmd_verify, VerifyConfig
from torus2d.largebatch import (IMAGENET_TRAIN_SIZE, LarsConfig, lars_step, lr_config_b,
                                momentum_b, smooth_labels, smoothed_cross_entropy)
from torus2d.topology import PRESET_GRIDS, GridTopology, factorizations
from torus2d.trainsim import TrainSimSpec

ALGS = ("ring", "hier", "torus")
MATRIX_N = (1, 2, 3, 4, 6, 8, 9, 12, 16, 32, 64)
MATRIX_LENGTHS = (1, 7, 64, 1000)


def fsum_oracle(inputs):
    return np.array([math.fsum(col) for col in inputs.astype(np.float64).T])


def _matrix():
    for n in MATRIX_N:
        for t in factorizations(n):
            for length in MATRIX_LENGTHS:
                yield t, length


def c01_op_counts():
    bad = []
    for t in PRESET_GRIDS:
        torus = trace("torus", t, 10**6)
        ring = trace("ring", t, 10**6)
        if torus.horizontal_steps != 2 * (t.x - 1) or ring.total_steps != 2 * (t.n_ranks - 1):
            bad.append(str(t))
    t = GridTopology(1024, 32, 32)
    pair = (trace("torus", t, 1).horizontal_steps, trace("ring", t, 1).total_steps)
    return not bad and pair == (62, 2046), f"32x32 -> {pair}; mismatches {bad}"


def c02_volume():
    worst = 0
    for t in list(PRESET_GRIDS) + [GridTopology(12, 4, 3), GridTopology(8, 2, 4)]:
        for d in (1, 999, t.n_ranks * 5, 25_500_000, 51_000_000):
            hier = trace("hier", t, d, 1).phases[1].per_step_bytes
            torus = trace("torus", t, d, 1).phases[1].per_step_bytes
            worst = max(worst, abs(hier - t.x * torus) - t.x)
    return worst <= 0, f"max excess over X-element slack: {worst}"


def c03_oracle():
    start = time.perf_counter()
    worst = {"f32": 0.0, "f64": 0.0}
    tol = {"f32": 1e-5, "f64": 1e-12}
    rng = np.random.default_rng(2024)
    for t, length in _matrix():
        for name, dt in (("f32", np.float32), ("f64", np.float64)):
            inputs = rng.random((t.n_ranks, length)).astype(dt)
            exact = fsum_oracle(inputs)
            for alg in ALGS:
                outs, _ = simulate_all_reduce(list(inputs), alg, topology=t,
                                              policy=ReductionPolicy(dt, dt))
                for o in outs:
                    err = np.max(np.abs(o.astype(np.float64) - exact) / np.abs(exact))
                    worst[name] = max(worst[name], float(err))
    elapsed = time.perf_counter() - start
    ok = worst["f32"] <= tol["f32"] and worst["f64"] <= tol["f64"] and elapsed < 60
    return ok, f"max rel err f32 {worst['f32']:.2e}, f64 {worst['f64']:.2e}, {elapsed:.1f} s"


def c04_trace_agreement():
    checked = mismatched = 0
    for t, length in _matrix():
        bufs = list(np.ones((t.n_ranks, length), dtype=np.float32))
        for alg in ALGS:
            _, fabric = simulate_all_reduce(bufs, alg, topology=t)
            predicted = trace(alg, t, length, 4)
            ok = same_shape(predicted, measured_report(fabric.log, alg, t))
            if alg != "hier":
                ok = ok and sends_per_rank(fabric.log, t.n_ranks) == [predicted.total_steps] * t.n_ranks
            checked += 1
            mismatched += not ok
    return mismatched == 0, f"{checked} (algorithm, grid, length) runs, {mismatched} mismatches"


def c05_latency_dominance():
    rng = np.random.default_rng(5)
    violations = 0
    trials = 0
    for x in (2, 3, 4, 8, 32, 72):
        for y in (2, 3, 5, 32, 48):
            t = GridTopology(x * y, x, y)
            for d in (1, 100, 10**4, 10**6, 51_000_000):
                for _ in range(4):
                    link = LinkModel(10 ** rng.uniform(-9, -3), 10 ** rng.uniform(8, 11))
                    trials += 1
                    violations += not (predict_time(trace("torus", t, d, 2), link)
                                       < predict_time(trace("ring", t, d, 2), link))
    report, status = cmd_bench(BenchConfig(n_ranks=16, grid=GridTopology(16, 4, 4), size=64,
                                           alpha=2e-3, iters=5, warmup=1))
    med = {r["algo"]: r["median_s"] for r in report["rows"]}
    ok = violations == 0 and status == 0 and med["torus"] < med["ring"]
    return ok, (f"{trials} sweep points, {violations} violations; inproc 16 ranks alpha=2ms: "
                f"torus {med['torus'] * 1e3:.1f} ms < ring {med['ring'] * 1e3:.1f} ms")


def c06_efficiency_ordering():
    rows = scaling_model(DOCUMENTED_LINK)
    effs = [e for _, _, e in rows]
    ok = [n for n, _, _ in rows] == [1024, 2048, 3456, 4096] and all(
        a > b for a, b in zip(effs, effs[1:]))
    return ok, "modelled " + ", ".join(f"{n}: {e:.3f}" for n, _, e in rows)


def c07_schedule():
    epochs = np.linspace(0, 89.999, 997)
    m = [momentum_b(e, 32768, IMAGENET_TRAIN_SIZE) for e in epochs]
    fixed = all(len({momentum_b(e, b) for e in epochs}) == 1 for b in (16384, 55296, 121856))
    ok = (lr_config_b(0) == 0.2 and lr_config_b(90) == 0.0
          and 29.0 * (1 - 90 / 90) ** 2 == 0.0 and 50.0 * (1 - 90 / 90) ** 2 == 0.0
          and max(abs(v - 0.9) for v in m) <= 1e-12 and fixed)
    return ok, f"lr(0)={lr_config_b(0)}, lr(90)={lr_config_b(90)}, max|m-0.9|={max(abs(v - 0.9) for v in m):.1e}"


def c08_label_smoothing():
    rng = np.random.default_rng(8)
    worst_sum = 0.0
    for k in (1, 2, 10, 1000):
        for eps in (0.0, 0.1, 0.5, 1.0):
            worst_sum = max(worst_sum, abs(smooth_labels(int(rng.integers(k)), eps, k).sum() - 1))
    onehot = all(np.array_equal(smooth_labels(i, 0.0, 7), np.eye(7)[i]) for i in range(7))
    worst_fd = 0.0
    h = 1e-6
    for _ in range(100):
        k = int(rng.integers(2, 20))
        z = rng.normal(scale=2, size=k)
        q = smooth_labels(int(rng.integers(k)), float(rng.uniform(0, 0.5)), k)
        _, g = smoothed_cross_entropy(z, q)
        fd = np.array([(smoothed_cross_entropy(z + h * e, q)[0]
                        - smoothed_cross_entropy(z - h * e, q)[0]) / (2 * h) for e in np.eye(k)])
        worst_fd = max(worst_fd, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    ok = worst_sum <= 1e-12 and onehot and worst_fd <= 1e-4
    return ok, f"max |sum-1| {worst_sum:.1e}, max FD rel err {worst_fd:.1e}"


def c09_lars():
    rng = np.random.default_rng(9)
    cfg = LarsConfig(coefficient=0.01, eps=0.0, weight_decay=0.0)
    worst = 0.0
    for _ in range(200):
        shape = tuple(rng.integers(1, 30, size=int(rng.integers(1, 4))))
        w = rng.normal(size=shape) * 10 ** rng.uniform(-2, 2)
        g = rng.normal(size=shape) * 10 ** rng.uniform(-4, 2)
        lr = float(10 ** rng.uniform(-2, 1.5))
        _, v = lars_step(w, g, np.zeros_like(w), lr, 0.0, cfg)
        expected = lr * 0.01 * np.linalg.norm(w)
        worst = max(worst, abs(np.linalg.norm(v) - expected) / expected)
    return worst <= 1e-12, f"max rel deviation {worst:.1e} over 200 layers"


def c10_trainsim():
    start = time.perf_counter()
    spec = TrainSimSpec(workers=4, per_worker_batch=8, steps=50, optimizer="lars",
                        label_smoothing=0.1, algorithm="torus", dtype="f64", lr=2.0)
    report, status = cmd_trainsim(spec)
    elapsed = time.perf_counter() - start
    ok = status == 0 and report["max_rel_divergence"] < 1e-8 and elapsed < 30
    return ok, f"max rel divergence {report['max_rel_divergence']:.1e}, {elapsed:.2f} s"


def c11_determinism():
    rng = np.random.default_rng(11)
    t = GridTopology(12, 4, 3)
    bufs = list(rng.standard_normal((12, 333)).astype(np.float32))
    same = True
    for alg in ALGS:
        runs = [simulate_all_reduce(bufs, alg, topology=t, mode=mode)
                for mode in ("rounds", "rounds", "threads", "threads")]
        ref_out, ref_fab = runs[0]
        for outs, fab in runs[1:]:
            same &= all(np.array_equal(a, b) for a, b in zip(ref_out, outs))
            same &= sorted(fab.log) == sorted(ref_fab.log)
        same &= runs[0][1].log == runs[1][1].log
    reports = [cmd_verify(VerifyConfig(ranks=(1, 6, 9)))[0] for _ in range(2)]
    sims = [cmd_trainsim(TrainSimSpec(steps=10, optimizer="lars", label_smoothing=0.1))[0]
            for _ in range(2)]
    ok = same and reports[0] == reports[1] and sims[0] == sims[1]
    return ok, "collective outputs, send logs, verify and trainsim reports identical across runs"


def c12_mixed_precision():
    rng = np.random.default_rng(12)
    t = GridTopology(16, 4, 4)
    err = {"mixed": [], "half": []}
    policies = {"mixed": ReductionPolicy(np.float16, np.float32),
                "half": ReductionPolicy(np.float16, np.float16)}
    for trial in range(100):
        inputs = rng.uniform(-1, 1, size=(16, 256)).astype(np.float16)
        exact = fsum_oracle(inputs)
        alg = ALGS[trial % 3]
        for name, policy in policies.items():
            outs, _ = simulate_all_reduce(list(inputs), alg, topology=t, policy=policy)
            err[name].append(float(np.mean(np.abs(outs[0].astype(np.float64) - exact))))
    mixed, half = np.mean(err["mixed"]), np.mean(err["half"])
    return mixed <= half, f"mean abs err f16/f32 {mixed:.2e} <= f16/f16 {half:.2e}"


CRITERIA = [
    ("1 op-count reproduction", c01_op_counts),
    ("2 volume claim", c02_volume),
    ("3 oracle equivalence", c03_oracle),
    ("4 trace/execution agreement", c04_trace_agreement),
    ("5 latency dominance", c05_latency_dominance),
    ("6 efficiency ordering", c06_efficiency_ordering),
    ("7 schedule formulas", c07_schedule),
    ("8 label smoothing", c08_label_smoothing),
    ("9 LARS invariant", c09_lars),
    ("10 end-to-end equivalence", c10_trainsim),
    ("11 determinism", c11_determinism),
    ("12 mixed precision", c12_mixed_precision),
]


def _line(name, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}"


@pytest.mark.parametrize("name,check", CRITERIA, ids=[c[1].__name__ for c in CRITERIA])
def test_criterion(name, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print("\n" + _line(name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for name, check in CRITERIA:
        ok, detail = check()
        results.append(ok)
        print(_line(name, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
