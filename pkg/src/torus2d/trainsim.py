"""Desk-scale data-parallel SGD: K simulated workers synchronised by an
all-reduce versus one process stepping on the whole K*b batch.

The model is a multinomial logistic regression (``hidden=0``) or a
one-hidden-layer tanh perceptron, trained on seeded Gaussian clusters.
Every worker keeps its own parameter replica and optimizer state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .collectives import ReductionPolicy, simulate_all_reduce
from .largebatch import Lars, LarsConfig, MomentumSGD, smooth_label_matrix, smoothed_cross_entropy
from .topology import GridTopology, near_square_grid


@dataclass(frozen=True)
class TrainSimSpec:
    workers: int = 4
    per_worker_batch: int = 8
    steps: int = 50
    n_samples: int = 2048
    n_features: int = 16
    n_classes: int = 10
    hidden: int = 0
    optimizer: str = "sgd"  # "sgd" or "lars"
    label_smoothing: float = 0.0
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    lars_coefficient: float = 0.01
    lars_eps: float = 1e-6
    algorithm: str = "torus"
    grid: Optional[GridTopology] = None
    dtype: str = "f64"
    seed: int = 0
    tolerance: Optional[float] = None

    def __post_init__(self):
        if min(self.workers, self.per_worker_batch, self.steps, self.n_samples,
               self.n_features, self.n_classes) < 1:
            raise ValueError("sizes and counts must be positive")
        if self.hidden < 0:
            raise ValueError("hidden must be >= 0")
        if self.optimizer not in ("sgd", "lars"):
            raise ValueError(f"optimizer must be 'sgd' or 'lars', got {self.optimizer!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")
        if self.grid is not None and self.grid.n_ranks != self.workers:
            raise ValueError(f"grid {self.grid} does not have {self.workers} ranks")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def effective_tolerance(self) -> float:
        if self.tolerance is not None:
            return self.tolerance
        return 1e-8 if self.dtype == "f64" else 1e-4

    @property
    def topology(self) -> GridTopology:
        return self.grid or near_square_grid(self.workers)


@dataclass
class TrainSimReport:
    spec: dict
    divergence: List[float]
    max_rel_divergence: float
    step0_grad_rel_err: float
    final_loss_distributed: float
    final_loss_single: float
    final_loss_diff: float
    replicas_identical: bool
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_divergence < self.tolerance and self.replicas_identical)

    def to_dict(self) -> dict:
        return asdict(self)


def make_dataset(spec: TrainSimSpec) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    centers = rng.normal(0.0, 2.0, size=(spec.n_classes, spec.n_features))
    labels = rng.integers(spec.n_classes, size=spec.n_samples)
    x = centers[labels] + rng.normal(size=(spec.n_samples, spec.n_features))
    return x.astype(spec.np_dtype), labels


def init_params(spec: TrainSimSpec) -> List[np.ndarray]:
    rng = np.random.default_rng([spec.seed, 2])
    dt = spec.np_dtype
    if spec.hidden == 0:
        shapes = [(spec.n_features, spec.n_classes)]
    else:
        shapes = [(spec.n_features, spec.hidden), (spec.hidden, spec.n_classes)]
    params = []
    for fan_in, fan_out in shapes:
        params.append((rng.normal(size=(fan_in, fan_out)) / np.sqrt(fan_in)).astype(dt))
        params.append(np.zeros(fan_out, dtype=dt))
    return params


def loss_and_grads(params: List[np.ndarray], x: np.ndarray,
                   targets: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    """Mean smoothed cross-entropy over the rows of ``x`` and its gradients."""
    if len(params) == 2:
        w, b = params
        loss, dlogits = smoothed_cross_entropy(x @ w + b, targets)
        return loss, [x.T @ dlogits, dlogits.sum(axis=0)]
    w1, b1, w2, b2 = params
    h = np.tanh(x @ w1 + b1)
    loss, dlogits = smoothed_cross_entropy(h @ w2 + b2, targets)
    dh = (dlogits @ w2.T) * (1.0 - h * h)
    return loss, [x.T @ dh, dh.sum(axis=0), h.T @ dlogits, dlogits.sum(axis=0)]


def flatten(arrays: List[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def unflatten(vec: np.ndarray, like: List[np.ndarray]) -> List[np.ndarray]:
    out, offset = [], 0
    for a in like:
        out.append(vec[offset:offset + a.size].reshape(a.shape))
        offset += a.size
    return out


def _optimizer(spec: TrainSimSpec, params):
    shapes = [p.shape for p in params]
    if spec.optimizer == "lars":
        cfg = LarsConfig(spec.lars_coefficient, spec.lars_eps, spec.weight_decay)
        return Lars(shapes, cfg, dtype=spec.np_dtype)
    return MomentumSGD(shapes, spec.weight_decay, dtype=spec.np_dtype)


def run_trainsim(spec: TrainSimSpec = TrainSimSpec()) -> TrainSimReport:
    x, labels = make_dataset(spec)
    targets = smooth_label_matrix(labels, spec.label_smoothing, spec.n_classes, dtype=spec.np_dtype)
    K, b = spec.workers, spec.per_worker_batch
    global_batch = K * b
    order = np.random.default_rng([spec.seed, 3]).permutation(spec.n_samples)
    policy = ReductionPolicy(spec.np_dtype, spec.np_dtype)
    topology = spec.topology

    single = init_params(spec)
    replicas = [[p.copy() for p in single] for _ in range(K)]
    single_opt = _optimizer(spec, single)
    worker_opts = [_optimizer(spec, single) for _ in range(K)]

    divergence = []
    step0_err = float("nan")
    replicas_identical = True
    for step in range(spec.steps):
        idx = order[(step * global_batch + np.arange(global_batch)) % spec.n_samples]
        _, full_grads = loss_and_grads(single, x[idx], targets[idx])

        shard_grads = []
        for k in range(K):
            shard = idx[k * b:(k + 1) * b]
            _, g = loss_and_grads(replicas[k], x[shard], targets[shard])
            shard_grads.append(flatten(g))
        sums, _ = simulate_all_reduce(shard_grads, spec.algorithm, topology=topology,
                                      policy=policy, mode="rounds")
        averaged = [s / spec.np_dtype(K) for s in sums]

        if step == 0:
            oracle = np.mean(np.stack(shard_grads).astype(np.float64), axis=0)
            step0_err = float(np.linalg.norm(averaged[0] - oracle) / np.linalg.norm(oracle))

        single = single_opt.step(single, full_grads, spec.lr, spec.momentum)
        for k in range(K):
            replicas[k] = worker_opts[k].step(replicas[k], unflatten(averaged[k], replicas[k]),
                                              spec.lr, spec.momentum)

        ref = flatten(single)
        rep0 = flatten(replicas[0])
        if any(not np.array_equal(rep0, flatten(r)) for r in replicas[1:]):
            replicas_identical = False
        divergence.append(float(np.linalg.norm(rep0 - ref) / np.linalg.norm(ref)))

    loss_d, _ = loss_and_grads(replicas[0], x, targets)
    loss_s, _ = loss_and_grads(single, x, targets)
    spec_dict = asdict(spec)
    spec_dict["grid"] = str(topology)
    return TrainSimReport(
        spec=spec_dict,
        divergence=divergence,
        max_rel_divergence=max(divergence),
        step0_grad_rel_err=step0_err,
        final_loss_distributed=loss_d,
        final_loss_single=loss_s,
        final_loss_diff=abs(loss_d - loss_s),
        replicas_identical=replicas_identical,
        tolerance=spec.effective_tolerance,
    )
