"""Step/volume traces of the all-reduce schedules and an alpha-beta time model.

A trace counts *sequential* steps per phase as seen by the slowest rank,
and the payload of the largest message in each step (the balanced partition
puts the larger chunks first, so the worst rank bounds the step).

Rows and columns run concurrently, phases run back to back, and compute
never overlaps communication.  Predicted times are therefore an upper
bound on what an overlapping implementation would see.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .topology import PRESET_GRIDS, GridTopology, max_chunk, near_square_grid

ALGORITHMS = ("ring", "hier", "torus")

CSV_COLUMNS = ("algorithm", "n", "x", "y", "phase", "steps", "per_step_bytes", "predicted_seconds")

# Phase names, in wire phase-code order.
PHASES = {
    "ring": ("ring",),
    "torus": ("horizontal_reduce_scatter", "vertical_all_reduce", "horizontal_all_gather"),
    "hier": ("intra_reduce", "leader_all_reduce", "intra_broadcast"),
}


@dataclass(frozen=True)
class PhaseCost:
    name: str
    steps: int
    per_step_bytes: int

    def __post_init__(self):
        if self.steps < 0 or self.per_step_bytes < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def total_bytes(self) -> int:
        return self.steps * self.per_step_bytes


@dataclass(frozen=True)
class CostReport:
    algorithm: str
    topology: GridTopology
    phases: Tuple[PhaseCost, ...]

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    @property
    def total_bytes(self) -> int:
        """Bytes a rank on the critical path sends."""
        return sum(p.total_bytes for p in self.phases)

    @property
    def horizontal_steps(self) -> int:
        """Steps spent in row rings (all of them, for the flat ring)."""
        if self.algorithm == "ring":
            return self.total_steps
        return self.phases[0].steps + self.phases[2].steps

    @property
    def vertical_steps(self) -> int:
        if self.algorithm == "ring":
            return 0
        return self.phases[1].steps

    def phase(self, name: str) -> PhaseCost:
        for p in self.phases:
            if p.name == name:
                return p
        raise KeyError(name)

    def to_dict(self, link: Optional["LinkModel"] = None) -> dict:
        out = {
            "algorithm": self.algorithm,
            "n": self.topology.n_ranks,
            "x": self.topology.x,
            "y": self.topology.y,
            "phases": [asdict(p) for p in self.phases],
            "total_steps": self.total_steps,
            "total_bytes": self.total_bytes,
        }
        if link is not None:
            out["predicted_seconds"] = predict_time(self, link)
        return out

    def rows(self, link: Optional["LinkModel"] = None) -> List[dict]:
        t = self.topology
        return [
            {
                "algorithm": self.algorithm, "n": t.n_ranks, "x": t.x, "y": t.y,
                "phase": p.name, "steps": p.steps, "per_step_bytes": p.per_step_bytes,
                "predicted_seconds": "" if link is None else phase_time(p, link),
            }
            for p in self.phases
        ]


@dataclass(frozen=True)
class LinkModel:
    alpha: float  # seconds per message
    beta: float  # bytes per second

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


# One plausible setting for a V100 / dual-EDR cluster: 50 us per message
# including software overhead, 12.5 GB/s effective per-link bandwidth.
DOCUMENTED_LINK = LinkModel(alpha=5e-5, beta=12.5e9)


@dataclass(frozen=True)
class ClusterSpec:
    topology: GridTopology
    gradient_bytes: int
    per_gpu_images_per_sec: float
    per_worker_batch: int
    element_bytes: int = 2

    def __post_init__(self):
        if self.gradient_bytes <= 0 or self.per_gpu_images_per_sec <= 0 or self.per_worker_batch <= 0:
            raise ValueError(f"cluster spec values must be positive: {self}")
        if self.element_bytes not in (2, 4, 8):
            raise ValueError(f"element_bytes must be 2, 4 or 8, got {self.element_bytes}")

    @property
    def payload_elements(self) -> int:
        return -(-self.gradient_bytes // self.element_bytes)


def trace(algorithm: str, t: GridTopology, payload_elements: int, element_bytes: int = 4) -> CostReport:
    """Per-phase sequential steps and largest per-step payload for one all-reduce."""
    D, e = payload_elements, element_bytes
    N, X, Y = t.n_ranks, t.x, t.y
    if algorithm == "ring":
        phases = [(2 * (N - 1), max_chunk(D, N))]
    elif algorithm == "torus":
        row_chunk = max_chunk(D, X)
        phases = [(X - 1, row_chunk), (2 * (Y - 1), max_chunk(row_chunk, Y)), (X - 1, row_chunk)]
    elif algorithm == "hier":
        phases = [(X - 1, D), (2 * (Y - 1), max_chunk(D, Y)), (X - 1, D)]
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    return CostReport(algorithm, t, tuple(
        PhaseCost(name, steps, elems * e) for name, (steps, elems) in zip(PHASES[algorithm], phases)))


def phase_time(p: PhaseCost, link: LinkModel) -> float:
    return p.steps * (link.alpha + p.per_step_bytes / link.beta)


def predict_time(report: CostReport, link: LinkModel) -> float:
    return sum(phase_time(p, link) for p in report.phases)


def iteration_time(spec: ClusterSpec, link: LinkModel, algorithm: str) -> float:
    compute = spec.per_worker_batch / spec.per_gpu_images_per_sec
    comm = predict_time(trace(algorithm, spec.topology, spec.payload_elements, spec.element_bytes), link)
    return compute + comm


def predict_efficiency(spec: ClusterSpec, link: LinkModel, algorithm: str = "torus",
                       baseline_n: int = 4,
                       baseline_topology: Optional[GridTopology] = None) -> Tuple[float, float]:
    """Modelled (images/s, GPU scaling efficiency) relative to ``baseline_n`` GPUs.

    The baseline runs the same algorithm on ``baseline_topology`` (default:
    the most square grid of ``baseline_n`` ranks).
    """
    if baseline_n < 1 or baseline_n > spec.topology.n_ranks:
        raise ValueError(f"baseline_n must be in [1, {spec.topology.n_ranks}], got {baseline_n}")
    base_t = baseline_topology or near_square_grid(baseline_n)
    if base_t.n_ranks != baseline_n:
        raise ValueError(f"baseline topology {base_t} does not have {baseline_n} ranks")
    base = ClusterSpec(base_t, spec.gradient_bytes, spec.per_gpu_images_per_sec,
                       spec.per_worker_batch, spec.element_bytes)
    n = spec.topology.n_ranks
    throughput = n * spec.per_worker_batch / iteration_time(spec, link, algorithm)
    base_throughput = baseline_n * spec.per_worker_batch / iteration_time(base, link, algorithm)
    return throughput, throughput / ((n / baseline_n) * base_throughput)


def measured_report(records: Iterable, algorithm: str, t: GridTopology,
                    collective_id: Optional[int] = None) -> CostReport:
    """Rebuild a :class:`CostReport` from the send log of an instrumented run.

    Steps in a phase are the distinct step indices seen on the wire; the
    per-step payload is the largest message of any step in that phase.
    """
    steps: Dict[int, set] = {}
    largest: Dict[int, int] = {}
    for rec in records:
        if collective_id is not None and rec.collective_id != collective_id:
            continue
        steps.setdefault(rec.phase, set()).add(rec.step)
        largest[rec.phase] = max(largest.get(rec.phase, 0), rec.nbytes)
    names = PHASES[algorithm]
    unknown = set(steps) - set(range(len(names)))
    if unknown:
        raise ValueError(f"phase codes {sorted(unknown)} not used by {algorithm}")
    return CostReport(algorithm, t, tuple(
        PhaseCost(name, len(steps.get(code, ())), largest.get(code, 0))
        for code, name in enumerate(names)))


def sends_per_rank(records: Iterable, n_ranks: int) -> List[int]:
    counts = [0] * n_ranks
    for rec in records:
        counts[rec.src] += 1
    return counts


def same_shape(a: CostReport, b: CostReport) -> bool:
    """Step counts, per-step payloads and byte totals agree on every phase
    that has steps (an empty phase has no payload to measure)."""
    if a.algorithm != b.algorithm or len(a.phases) != len(b.phases):
        return False
    for pa, pb in zip(a.phases, b.phases):
        if pa.steps != pb.steps:
            return False
        if pa.steps and pa.per_step_bytes != pb.per_step_bytes:
            return False
    return a.total_steps == b.total_steps and a.total_bytes == b.total_bytes


def sweep(grids: Sequence[GridTopology], payload_elements: int, element_bytes: int,
          algorithms: Sequence[str] = ALGORITHMS) -> List[CostReport]:
    return [trace(alg, t, payload_elements, element_bytes) for t in grids for alg in algorithms]


def to_json(reports: Sequence[CostReport], link: Optional[LinkModel] = None) -> str:
    return json.dumps([r.to_dict(link) for r in reports], indent=2)


def to_csv(reports: Sequence[CostReport], link: Optional[LinkModel] = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerows(r.rows(link))
    return buf.getvalue()


# Measured ResNet-50 throughput at 4 GPUs, per-worker batch 32, and the
# measured scaling efficiency at larger cluster sizes.
SCALING_BASE_IMAGES_PER_SEC = 2565.0
SCALING_EFFICIENCY = {1024: 0.8475, 2048: 0.8310, 3456: 0.7408, 4096: 0.7344}
RESNET50_GRADIENT_BYTES = 102_000_000


def scaling_model(link: LinkModel = DOCUMENTED_LINK, grids: Sequence[GridTopology] = None,
                 algorithm: str = "torus") -> List[Tuple[int, float, float]]:
    """Modelled (n, images/s, efficiency) at the measured cluster sizes."""
    grids = grids or [g for g in PRESET_GRIDS if g.n_ranks in SCALING_EFFICIENCY]
    out = []
    for t in grids:
        spec = ClusterSpec(t, RESNET50_GRADIENT_BYTES, SCALING_BASE_IMAGES_PER_SEC / 4, 32)
        ips, eff = predict_efficiency(spec, link, algorithm)
        out.append((t.n_ranks, ips, eff))
    return out
