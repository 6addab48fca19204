"""``torus2d`` command line: verify, bench, cost, schedule, trainsim.

Exit codes: 0 pass, 1 verification/tolerance failure, 2 usage/config error,
3 transport failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from typing import List, Optional

from . import harness
from .collectives import ALGORITHMS
from .costmodel import DOCUMENTED_LINK, LinkModel
from .topology import PRESET_GRIDS, TopologyError, factorizations, near_square_grid, parse_grid
from .trainsim import TrainSimSpec
from .transport import TransportError, load_peers

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_TRANSPORT = 0, 1, 2, 3

CSV_FIELDS = {
    "verify": ("case", "algorithm", "n", "x", "y", "length", "dtype", "max_rel_err",
               "trace_steps", "measured_steps", "passed"),
    "bench": ("algo", "n", "x", "y", "bytes", "min_s", "median_s", "bus_GBps",
              "measured_steps", "trace_steps", "predicted_s"),
    "cost": ("algorithm", "n", "x", "y", "phase", "steps", "per_step_bytes", "predicted_seconds"),
    "schedule": ("epoch", "lr", "momentum", "per_worker_batch", "worker_count", "total_batch"),
    "trainsim": ("step", "rel_divergence"),
}

log = logging.getLogger("torus2d")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, size: Optional[int]) -> None:
    p.add_argument("--ranks", type=int, help="number of ranks N")
    p.add_argument("--grid", help="grid as XxY, e.g. 32x32 (X = ranks per row)")
    p.add_argument("--algo", choices=ALGORITHMS, action="append",
                   help="algorithm; repeat for several (default depends on command)")
    p.add_argument("--size", type=int, default=size, help="payload element count")
    p.add_argument("--wire-dtype", choices=("f16", "f32", "f64"), default="f32")
    p.add_argument("--accum-dtype", choices=("f32", "f64"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torus2d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check every all-reduce against a float64 oracle")
    _common(p, None)
    p.add_argument("--lengths", help="comma-separated payload lengths (default 1,7,64,1000)")
    p.add_argument("--dtypes", default="f32,f64", help="comma-separated dtypes to verify")
    p.add_argument("--fault", action="store_true", help="flip one payload byte in flight")

    p = sub.add_parser("bench", help="time all-reduce on the in-process fabric or TCP")
    _common(p, 1 << 16)
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--rank", type=int, help="this process's rank (tcp)")
    p.add_argument("--peers", help="peer file: 'rank host:port' per line (tcp)")
    p.add_argument("--alpha", type=float, default=0.0,
                   help="per-message latency in seconds; injected as a delay on inproc")
    p.add_argument("--beta", type=float, default=10e9, help="bandwidth in bytes/s for predictions")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--timeout", type=float, default=30.0, help="tcp receive timeout in seconds")

    p = sub.add_parser("cost", help="alpha-beta cost tables for a grid sweep")
    _common(p, 51_000_000)
    p.add_argument("--preset", choices=("paper-grids",), help="built-in grid sweep")
    p.add_argument("--alpha", type=float, default=DOCUMENTED_LINK.alpha)
    p.add_argument("--beta", type=float, default=DOCUMENTED_LINK.beta)

    p = sub.add_parser("schedule", help="per-epoch LR, momentum and batch size table")
    _common(p, None)
    p.add_argument("--schedule", default="exp2",
                   help="reference|exp1|exp2|exp3|exp4 or a JSON schedule file")
    p.add_argument("--epoch-step", type=float, default=1.0)

    p = sub.add_parser("trainsim", help="distributed vs single-process SGD equivalence")
    _common(p, None)
    p.add_argument("--batch", type=int, default=8, help="per-worker batch")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--optimizer", choices=("sgd", "lars"), default="sgd")
    p.add_argument("--smoothing", type=float, default=0.0, help="label smoothing epsilon")
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--hidden", type=int, default=0, help="hidden units (0: logistic regression)")
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--tolerance", type=float)
    return parser


def _topology(args, default_ranks: Optional[int] = None):
    if args.grid:
        return parse_grid(args.grid, args.ranks)
    n = args.ranks or default_ranks
    return near_square_grid(n) if n else None


def _csv_list(text: Optional[str], cast=int) -> Optional[List]:
    if text is None:
        return None
    return [cast(v) for v in text.split(",") if v]


def run(args) -> tuple:
    cmd = args.command
    if cmd == "verify":
        grids = None
        if args.grid:
            grids = [parse_grid(args.grid, args.ranks)]
        elif args.ranks:
            grids = factorizations(args.ranks)
        cfg = harness.VerifyConfig(
            lengths=_csv_list(args.lengths) or (1, 7, 64, 1000),
            dtypes=_csv_list(args.dtypes, str),
            algorithms=tuple(args.algo or ALGORITHMS),
            grids=grids, seed=args.seed, fault=args.fault)
        return harness.cmd_verify(cfg)
    if cmd == "bench":
        peers = load_peers(args.peers) if args.peers else None
        n = len(peers) if peers else None
        if args.grid:
            topo = parse_grid(args.grid, n or args.ranks)
        else:
            topo = near_square_grid(n or args.ranks or 16)
        if n is not None and topo.n_ranks != n:
            raise UsageError(f"peer file lists {n} ranks, grid has {topo.n_ranks}")
        cfg = harness.BenchConfig(
            n_ranks=topo.n_ranks, grid=topo, algorithms=tuple(args.algo or ("ring", "torus")),
            size=args.size, wire_dtype=args.wire_dtype, accum_dtype=args.accum_dtype,
            alpha=args.alpha, beta=args.beta, iters=args.iters, warmup=args.warmup,
            seed=args.seed, transport=args.transport, rank=args.rank, peers=peers,
            timeout=args.timeout)
        return harness.cmd_bench(cfg)
    if cmd == "cost":
        if args.preset or not (args.grid or args.ranks):
            grids = PRESET_GRIDS
        else:
            grids = [_topology(args)]
        element_bytes = {"f16": 2, "f32": 4, "f64": 8}[args.wire_dtype]
        cfg = harness.CostConfig(grids=grids, size=args.size, element_bytes=element_bytes,
                                 algorithms=tuple(args.algo or ALGORITHMS),
                                 link=LinkModel(args.alpha, args.beta))
        return harness.cmd_cost(cfg)
    if cmd == "schedule":
        return harness.cmd_schedule(args.schedule, args.epoch_step)
    if cmd == "trainsim":
        topo = _topology(args, default_ranks=4)
        algo = (args.algo or ["torus"])[0]
        spec = TrainSimSpec(
            workers=topo.n_ranks, grid=topo, per_worker_batch=args.batch, steps=args.steps,
            optimizer=args.optimizer, label_smoothing=args.smoothing, lr=args.lr,
            momentum=args.momentum, weight_decay=args.weight_decay, hidden=args.hidden,
            n_samples=args.samples, n_features=args.features, n_classes=args.classes,
            algorithm=algo, dtype=args.accum_dtype or "f64", seed=args.seed,
            tolerance=args.tolerance)
        return harness.cmd_trainsim(spec)
    raise UsageError(f"unknown command {cmd!r}")


def render(report: dict, command: str, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, indent=2, sort_keys=True) + "\n"
    rows = report.get("rows") if command != "verify" else report["cases"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS[command], extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows or [])
    return buf.getvalue()


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        report, status = run(args)
    except TransportError as exc:
        log.error("transport failure: %s", exc)
        return EXIT_TRANSPORT
    except (UsageError, TopologyError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    # over TCP only rank 0 reports
    if args.command == "bench" and args.transport == "tcp" and args.rank != 0:
        return status
    text = render(report, args.command, args.format)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if status != EXIT_OK:
        log.error("%s failed", args.command)
    return status


if __name__ == "__main__":
    sys.exit(main())
