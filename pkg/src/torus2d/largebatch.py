"""Large mini-batch training math: LR/momentum schedules, LARS, label
smoothing and batch-size control.

Epochs are continuous (``processed_samples / dataset_size``) and schedule
phases are half-open ``[start, end)`` intervals.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

IMAGENET_TRAIN_SIZE = 1_281_167


@dataclass(frozen=True)
class LrConfigB:
    warmup_epochs: float = 5.0
    lr_start: float = 0.2
    base_lr_early: float = 29.0
    base_lr_late: float = 50.0
    decay_end_epoch: float = 90.0
    switch_epoch: float = 30.0
    reference_batch: int = 32768
    reference_momentum: float = 0.9

    def __post_init__(self):
        values = asdict(self)
        if any(v <= 0 for v in values.values()):
            raise ValueError(f"all LrConfigB fields must be positive: {values}")
        if not self.switch_epoch < self.decay_end_epoch:
            raise ValueError("switch_epoch must come before decay_end_epoch")
        if not 0 < self.reference_momentum < 1:
            raise ValueError("reference_momentum must be in (0, 1)")


@dataclass(frozen=True)
class LrConfigA:
    warmup_epochs: float = 34.0
    base_lr: float = 34.0
    initial_lr: float = 1e-5
    momentum: float = 0.9
    decay_end_epoch: float = 90.0
    decay_power: float = 2.0

    def __post_init__(self):
        values = asdict(self)
        if any(v <= 0 for v in values.values()):
            raise ValueError(f"all LrConfigA fields must be positive: {values}")
        if not self.warmup_epochs < self.decay_end_epoch:
            raise ValueError("warmup must end before decay_end_epoch")


def _check_epoch(epoch: float) -> None:
    if not epoch >= 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")


def lr_config_b(epoch: float, cfg: LrConfigB = LrConfigB()) -> float:
    """Linear warmup, then ``base * (1 - epoch/90)**2`` with the base
    switching from 29 to 50 at epoch 30.

    The schedule is discontinuous at both 5 (29.0 -> ~25.87) and 30
    (~12.89 -> ~22.22) epochs; both jumps are kept as written.
    """
    _check_epoch(epoch)
    if epoch < cfg.warmup_epochs:
        return cfg.lr_start + (cfg.base_lr_early - cfg.lr_start) * epoch / cfg.warmup_epochs
    if epoch >= cfg.decay_end_epoch:
        return 0.0
    base = cfg.base_lr_early if epoch < cfg.switch_epoch else cfg.base_lr_late
    return base * (1.0 - epoch / cfg.decay_end_epoch) ** 2


def lr_config_a(epoch: float, cfg: LrConfigA = LrConfigA()) -> float:
    _check_epoch(epoch)
    if epoch < cfg.warmup_epochs:
        return cfg.initial_lr + (cfg.base_lr - cfg.initial_lr) * epoch / cfg.warmup_epochs
    if epoch >= cfg.decay_end_epoch:
        return 0.0
    frac = (epoch - cfg.warmup_epochs) / (cfg.decay_end_epoch - cfg.warmup_epochs)
    return cfg.base_lr * (1.0 - frac) ** cfg.decay_power


def noise_scale_b(epoch: float, dataset_size: int = IMAGENET_TRAIN_SIZE,
                  cfg: LrConfigB = LrConfigB()) -> float:
    """SGD noise scale ``lr * (dataset / batch) / (1 - momentum)`` at the
    32K reference batch and momentum 0.9."""
    lr = lr_config_b(epoch, cfg)
    return lr * (dataset_size / cfg.reference_batch) / (1.0 - cfg.reference_momentum)


def momentum_b(epoch: float, total_batch: int, dataset_size: int = IMAGENET_TRAIN_SIZE,
               cfg: LrConfigB = LrConfigB()) -> float:
    """Momentum that keeps the noise scale at its reference value for
    ``total_batch``.

    ``1 - lr * (dataset / total_batch) / noise_scale`` reduces to
    ``1 - (1 - 0.9) * 32768 / total_batch``; the reduced form is used so the
    result is exactly independent of the epoch.  Clamped to ``[0, 1)``.
    """
    if total_batch <= 0:
        raise ValueError(f"total_batch must be positive, got {total_batch}")
    _check_epoch(epoch)
    m = 1.0 - (1.0 - cfg.reference_momentum) * cfg.reference_batch / total_batch
    return min(max(m, 0.0), math.nextafter(1.0, 0.0))


def smooth_labels(true_label: int, epsilon: float = 0.1, num_classes: int = 1000) -> np.ndarray:
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if not 0 <= true_label < num_classes:
        raise ValueError(f"label {true_label} out of range [0, {num_classes})")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    q = np.full(num_classes, epsilon / num_classes)
    q[true_label] += 1.0 - epsilon
    return q


def smooth_label_matrix(labels: np.ndarray, epsilon: float, num_classes: int,
                        dtype=np.float64) -> np.ndarray:
    """Row ``i`` is ``smooth_labels(labels[i], epsilon, num_classes)``."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels out of range [0, {num_classes})")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    q = np.full((labels.shape[0], num_classes), epsilon / num_classes, dtype=dtype)
    q[np.arange(labels.shape[0]), labels] += 1.0 - epsilon
    return q


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def smoothed_cross_entropy(logits: np.ndarray, q: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cross-entropy of ``softmax(logits)`` against target distribution ``q``.

    Returns ``(loss, dloss/dlogits)``.  For a batch (2-D input) the loss is
    the mean over rows and the gradient is scaled accordingly.
    """
    logits, q = np.asarray(logits), np.asarray(q)
    if logits.shape != q.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs targets {q.shape}")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        return float(-np.dot(q, logp)), np.exp(logp) - q
    n = logits.shape[0]
    loss = float(-np.sum(q * logp) / n)
    return loss, (np.exp(logp) - q) / n


@dataclass(frozen=True)
class LarsConfig:
    coefficient: float = 0.01
    eps: float = 1e-6
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.coefficient > 0:
            raise ValueError(f"coefficient must be > 0, got {self.coefficient}")
        if self.eps < 0 or self.weight_decay < 0:
            raise ValueError("eps and weight_decay must be >= 0")


def lars_local_lr(weights_norm: float, grad_norm: float, cfg: LarsConfig = LarsConfig()) -> float:
    """Trust ratio ``c * ||w|| / (||g|| + wd * ||w|| + eps)``; 1.0 if either norm is zero."""
    if weights_norm < 0 or grad_norm < 0:
        raise ValueError("norms must be nonnegative")
    if weights_norm == 0 or grad_norm == 0:
        return 1.0
    return cfg.coefficient * weights_norm / (grad_norm + cfg.weight_decay * weights_norm + cfg.eps)


def lars_step(weights: np.ndarray, grads: np.ndarray, velocity: np.ndarray, global_lr: float,
              momentum: float, cfg: LarsConfig = LarsConfig(),
              use_lars: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """One LARS update of a single layer; returns new ``(weights, velocity)``.

    Half-precision inputs are promoted to float32 for the update.  With
    ``use_lars=False`` the trust ratio is 1 (plain momentum SGD with weight
    decay), for layers excluded from LARS.
    """
    weights, grads, velocity = np.asarray(weights), np.asarray(grads), np.asarray(velocity)
    if not weights.shape == grads.shape == velocity.shape:
        raise ValueError(f"shape mismatch: w {weights.shape}, g {grads.shape}, v {velocity.shape}")
    dtype = np.promote_types(weights.dtype, np.float32)
    w = weights.astype(dtype, copy=False)
    g = grads.astype(dtype, copy=False)
    trust = 1.0
    if use_lars:
        trust = lars_local_lr(float(np.linalg.norm(w)), float(np.linalg.norm(g)), cfg)
    g = g + cfg.weight_decay * w
    new_velocity = momentum * velocity.astype(dtype, copy=False) + (global_lr * trust) * g
    return w - new_velocity, new_velocity


class Lars:
    """Layer-wise LARS state for a list of parameter arrays."""

    def __init__(self, shapes: Sequence[Tuple[int, ...]], cfg: LarsConfig = LarsConfig(),
                 exclude: Optional[Sequence[bool]] = None, dtype=np.float64):
        self.cfg = cfg
        self.exclude = list(exclude) if exclude is not None else [False] * len(shapes)
        if len(self.exclude) != len(shapes):
            raise ValueError("exclude flags must match the number of layers")
        self.velocity = [np.zeros(s, dtype=dtype) for s in shapes]

    def step(self, params: List[np.ndarray], grads: List[np.ndarray], lr: float,
             momentum: float) -> List[np.ndarray]:
        out = []
        for i, (w, g) in enumerate(zip(params, grads)):
            w, self.velocity[i] = lars_step(w, g, self.velocity[i], lr, momentum, self.cfg,
                                            use_lars=not self.exclude[i])
            out.append(w)
        return out


class MomentumSGD:
    def __init__(self, shapes: Sequence[Tuple[int, ...]], weight_decay: float = 0.0, dtype=np.float64):
        self.weight_decay = weight_decay
        self.velocity = [np.zeros(s, dtype=dtype) for s in shapes]

    def step(self, params, grads, lr, momentum):
        out = []
        for i, (w, g) in enumerate(zip(params, grads)):
            self.velocity[i] = momentum * self.velocity[i] + lr * (g + self.weight_decay * w)
            out.append(w - self.velocity[i])
        return out


@dataclass(frozen=True)
class BatchPhase:
    start_epoch: float
    end_epoch: float
    per_worker_batch: int
    worker_count: int

    @property
    def total_batch(self) -> int:
        return self.per_worker_batch * self.worker_count


@dataclass(frozen=True)
class BatchSchedule:
    """Piecewise-constant batch plan.  ``lr`` names the LR configuration
    (``"A"`` or ``"B"``) the schedule trains with."""

    name: str
    phases: Tuple[BatchPhase, ...]
    lr: str = "B"
    dataset_size: int = IMAGENET_TRAIN_SIZE
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        if self.phases[0].start_epoch != 0:
            raise ValueError("first phase must start at epoch 0")
        for prev, cur in zip(self.phases, self.phases[1:]):
            if cur.start_epoch != prev.end_epoch:
                raise ValueError(f"phases not contiguous at epoch {prev.end_epoch}")
        for p in self.phases:
            if not p.end_epoch > p.start_epoch:
                raise ValueError(f"empty phase {p}")
            if p.per_worker_batch <= 0 or p.worker_count <= 0:
                raise ValueError(f"phase batch sizes must be positive: {p}")
        if self.lr not in ("A", "B"):
            raise ValueError(f"lr must be 'A' or 'B', got {self.lr!r}")
        if self.dataset_size <= 0:
            raise ValueError("dataset_size must be positive")

    @property
    def final_epoch(self) -> float:
        return self.phases[-1].end_epoch

    def phase_at(self, epoch: float) -> BatchPhase:
        _check_epoch(epoch)
        for p in self.phases:
            if p.start_epoch <= epoch < p.end_epoch:
                return p
        raise ValueError(f"epoch {epoch} beyond schedule end {self.final_epoch}")

    def learning_rate(self, epoch: float) -> float:
        return lr_config_b(epoch) if self.lr == "B" else lr_config_a(epoch)

    def momentum(self, epoch: float) -> float:
        if self.lr == "A":
            return LrConfigA().momentum
        return momentum_b(epoch, self.phase_at(epoch).total_batch, self.dataset_size)

    def table(self, epoch_step: float = 1.0) -> List[Dict[str, float]]:
        """Rows of (epoch, lr, momentum, per_worker_batch, worker_count, total_batch)."""
        if not epoch_step > 0:
            raise ValueError("epoch_step must be positive")
        rows = []
        i = 0
        while True:
            epoch = i * epoch_step
            if epoch >= self.final_epoch:
                break
            p = self.phase_at(epoch)
            rows.append({
                "epoch": epoch,
                "lr": self.learning_rate(epoch),
                "momentum": self.momentum(epoch),
                "per_worker_batch": p.per_worker_batch,
                "worker_count": p.worker_count,
                "total_batch": p.total_batch,
            })
            i += 1
        return rows

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lr": self.lr,
            "dataset_size": self.dataset_size,
            "label_smoothing": self.label_smoothing,
            "phases": [asdict(p) for p in self.phases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BatchSchedule":
        try:
            phases = tuple(BatchPhase(float(p["start_epoch"]), float(p["end_epoch"]),
                                      int(p["per_worker_batch"]), int(p["worker_count"]))
                           for p in data["phases"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed schedule: {exc}") from exc
        return cls(name=data.get("name", "custom"), phases=phases, lr=data.get("lr", "B"),
                   dataset_size=int(data.get("dataset_size", IMAGENET_TRAIN_SIZE)),
                   label_smoothing=float(data.get("label_smoothing", 0.0)))

    @classmethod
    def load(cls, path) -> "BatchSchedule":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def batch_size_at(schedule: BatchSchedule, epoch: float) -> Tuple[int, int, int]:
    """(per_worker_batch, worker_count, total_batch) in force at ``epoch``."""
    p = schedule.phase_at(epoch)
    return p.per_worker_batch, p.worker_count, p.total_batch


def _phases(*rows) -> Tuple[BatchPhase, ...]:
    return tuple(BatchPhase(*r) for r in rows)


# Published batch plans.  Totals are quoted in units of 1024 samples (54K = 55296);
# worker counts are chosen so per_worker * workers hits those totals exactly.
PRESET_SCHEDULES: Dict[str, BatchSchedule] = {
    "reference": BatchSchedule("reference", _phases((0, 90, 32, 1024)), lr="B"),
    "exp1": BatchSchedule("exp1", _phases((0, 30, 16, 2176), (30, 90, 32, 2176)), lr="A"),
    "exp2": BatchSchedule("exp2", _phases((0, 30, 16, 3456), (30, 90, 32, 1728)), lr="B",
                          label_smoothing=0.1),
    "exp3": BatchSchedule("exp3", _phases((0, 30, 16, 3456), (30, 90, 32, 2048)), lr="B",
                          label_smoothing=0.1),
    "exp4": BatchSchedule("exp4", _phases((0, 30, 16, 2176), (30, 45, 16, 4352),
                                          (45, 75, 32, 2720), (75, 90, 32, 3808)), lr="A"),
}


def get_schedule(name_or_path: str) -> BatchSchedule:
    if name_or_path in PRESET_SCHEDULES:
        return PRESET_SCHEDULES[name_or_path]
    try:
        return BatchSchedule.load(name_or_path)
    except FileNotFoundError:
        raise ValueError(f"unknown schedule {name_or_path!r}: not a preset "
                         f"({', '.join(PRESET_SCHEDULES)}) and no such file") from None
