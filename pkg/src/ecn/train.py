"""SGD training, evaluation and learning-rate schedules."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .cascade import ECN, NetworkPlan
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, batches, channel_stats, prefetch
from .ops import softmax_cross_entropy
from .tensor import backward

__all__ = [
    "TrainConfig",
    "MetricsRecord",
    "TrainState",
    "TrainingDiverged",
    "NonFiniteGradient",
    "METRICS_HEADER",
    "lr_at",
    "sgd_step",
    "train",
    "evaluate",
    "make_checkpoint",
    "restore",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr", "wall_time"]


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 512
    base_lr: float = 0.1
    schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 1000
    checkpoint_every: int = 1
    prefetch: int = 0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.schedule not in ("cosine", "three-stage"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(schedule: str, epoch: int, total_epochs: int, base_lr: float) -> float:
    """Learning rate for a 0-based ``epoch``.

    ``cosine`` anneals from ``base_lr`` towards 0; ``three-stage`` divides by
    10 once 40% and again once 80% of the epochs have elapsed.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
    if schedule == "three-stage":
        # integer comparisons keep the boundaries exact: 5*epoch >= 2*T <=> epoch >= 0.4 T
        if 5 * epoch >= 4 * total_epochs:
            return base_lr / 100
        if 5 * epoch >= 2 * total_epochs:
            return base_lr / 10
        return base_lr
    raise ValueError(f"unknown schedule {schedule!r}")


def sgd_step(named_params, velocity: Dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, no_decay=frozenset()) -> None:
    """Momentum SGD: ``v = m*v + g + wd*p; p -= lr*v``.

    Parameters named in ``no_decay`` skip the decay term.  Missing gradients
    count as zero.  Nothing is modified if any gradient is non-finite.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    for name, p in named_params:
        dt = p.data.dtype.type
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay and name not in no_decay:
            g = g + dt(weight_decay) * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = dt(momentum) * v + g
        velocity[name] = v
        p.data -= dt(lr) * v


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: Optional[float]
    test_acc: Optional[float]
    lr: float
    wall_time: float

    def row(self) -> List[str]:
        def fmt(v):
            return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)
        return [fmt(getattr(self, k)) for k in METRICS_HEADER]


@dataclass
class TrainState:
    net: ECN
    velocity: Dict[str, np.ndarray]
    epoch: int  # epochs completed
    mean: np.ndarray
    std: np.ndarray
    metrics: List[MetricsRecord] = field(default_factory=list)


def evaluate(net: ECN, ds: Dataset, mean, std, batch_size: int = 1000) -> Tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy in eval mode."""
    total_loss = 0.0
    correct = 0
    for b in batches(ds, batch_size, train=False, mean=mean, std=std, dtype=net.dtype):
        logits = net(b.images, train=False)
        loss = softmax_cross_entropy(logits, b.labels)
        total_loss += loss.item() * len(b)
        correct += int((logits.data.reshape(len(b), -1).argmax(axis=1) == b.labels).sum())
    n = len(ds)
    return total_loss / n, correct / n


def make_checkpoint(state: TrainState, manifest: dict) -> Checkpoint:
    manifest = dict(manifest)
    manifest["normalization"] = {"mean": [float(v) for v in state.mean], "std": [float(v) for v in state.std]}
    return Checkpoint(
        manifest=manifest,
        epoch=state.epoch,
        params={n: p.data for n, p in state.net.named_parameters()},
        buffers=dict(state.net.named_buffers()),
        velocity=dict(state.velocity),
    )


def restore(ckpt: Checkpoint, seed: int = 0) -> TrainState:
    """Rebuild the network and optimiser state stored in a checkpoint."""
    plan = NetworkPlan.from_manifest(ckpt.manifest["plan"])
    net = ECN(plan, seed=seed, dtype=np.float32)
    for name, p in net.named_parameters():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if ckpt.params[name].shape != p.shape:
            raise CheckpointError(f"{name}: shape {ckpt.params[name].shape} does not match plan {p.shape}")
        p.data[...] = ckpt.params[name]
    for name, buf in net.named_buffers():
        if name not in ckpt.buffers or ckpt.buffers[name].shape != buf.shape:
            raise CheckpointError(f"checkpoint buffer {name} missing or misshapen")
        buf[...] = ckpt.buffers[name]
    norm = ckpt.manifest.get("normalization", {})
    return TrainState(net, {k: v.copy() for k, v in ckpt.velocity.items()}, ckpt.epoch,
                      np.asarray(norm.get("mean", [0.0] * 3)), np.asarray(norm.get("std", [1.0] * 3)))


def _write_metrics(outdir: str, metrics: List[MetricsRecord]) -> None:
    with open(os.path.join(outdir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for m in metrics:
            w.writerow(m.row())
    with open(os.path.join(outdir, "metrics.jsonl"), "w") as fh:
        for m in metrics:
            fh.write(json.dumps(asdict(m)) + "\n")


def _read_metrics(outdir: str, upto: int) -> List[MetricsRecord]:
    """Rows already logged for epochs ``<= upto`` (used when resuming into ``outdir``)."""
    path = os.path.join(outdir, "metrics.jsonl")
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        rows = [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]
    return [r for r in rows if r.epoch <= upto]


def train(net: ECN, train_set: Dataset, cfg: TrainConfig, test_set: Optional[Dataset] = None,
          outdir: Optional[str] = None, manifest: Optional[dict] = None,
          state: Optional[TrainState] = None, stop_after: Optional[int] = None,
          on_epoch: Optional[Callable[[MetricsRecord], None]] = None) -> TrainState:
    """Run (or resume) training.

    Batch order, augmentation and dropout masks for epoch ``e`` depend only on
    ``(cfg.seed, e)``, so a resumed run replays the same epochs as an
    uninterrupted one.  ``stop_after`` ends the run early after that many
    completed epochs without changing the schedule.
    """
    if train_set.class_count != net.plan.config.class_count:
        raise ValueError(f"dataset has {train_set.class_count} classes, network {net.plan.config.class_count}")
    if state is None:
        mean, std = channel_stats(train_set)
        state = TrainState(net, {}, 0, mean, std)
    manifest = dict(manifest or {})
    manifest.setdefault("plan", net.plan.to_manifest())
    manifest.setdefault("train", cfg.to_dict())
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        if state.epoch and not state.metrics:
            state.metrics = _read_metrics(outdir, state.epoch)

    no_decay = net.no_decay()
    params = net.named_parameters()
    initial_loss = None
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(state.epoch, last):
        t0 = time.perf_counter()
        lr = lr_at(cfg.schedule, epoch, cfg.epochs, cfg.base_lr)
        drop_rng = np.random.default_rng([cfg.seed, epoch, 2])
        loss_sum = 0.0
        correct = 0
        seen = 0
        stream = batches(train_set, cfg.batch_size, cfg.seed, epoch, train=True,
                         mean=state.mean, std=state.std, dtype=net.dtype)
        for b in prefetch(stream, cfg.prefetch):
            net.zero_grad()
            logits = net(b.images, train=True, rng=drop_rng)
            loss = softmax_cross_entropy(logits, b.labels)
            backward(loss)
            value = loss.item()
            if initial_loss is None:
                initial_loss = value
            elif value > cfg.divergence_factor * initial_loss:
                raise TrainingDiverged(
                    f"epoch {epoch}: batch loss {value:.4g} exceeds {cfg.divergence_factor}x "
                    f"the initial loss {initial_loss:.4g} (lr {lr:.4g})")
            sgd_step(params, state.velocity, lr, cfg.momentum, cfg.weight_decay, no_decay)
            loss_sum += value * len(b)
            correct += int((logits.data.reshape(len(b), -1).argmax(axis=1) == b.labels).sum())
            seen += len(b)
        state.epoch = epoch + 1

        test_loss = test_acc = None
        if test_set is not None and (state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs):
            test_loss, test_acc = evaluate(net, test_set, state.mean, state.std, cfg.eval_batch_size)
        record = MetricsRecord(state.epoch, loss_sum / seen, correct / seen, test_loss, test_acc, lr,
                               time.perf_counter() - t0)
        state.metrics.append(record)
        log.info("epoch %d loss %.4f acc %.4f lr %.4g", record.epoch, record.train_loss,
                 record.train_acc, lr)
        if on_epoch:
            on_epoch(record)
        if outdir:
            _write_metrics(outdir, state.metrics)
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == last:
                ckpt = make_checkpoint(state, manifest)
                save_checkpoint(os.path.join(outdir, f"epoch{state.epoch:04d}.ckpt"), ckpt)
                save_checkpoint(os.path.join(outdir, "last.ckpt"), ckpt)
    return state


def load_state(path: str) -> TrainState:
    return restore(load_checkpoint(path))
