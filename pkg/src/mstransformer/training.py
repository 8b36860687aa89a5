"""Adam, losses, batching and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, TextIO

import numpy as np

from .autograd import Tensor, cross_entropy, mse_loss

log = logging.getLogger(__name__)

__all__ = [
    "Adam",
    "ArrayDataset",
    "MetricsLog",
    "SequenceDataset",
    "TrainConfig",
    "TrainingDiverged",
    "clip_grad_norm",
    "cross_entropy",
    "evaluate",
    "make_batches",
    "mse_loss",
    "train",
]


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, epoch: int = -1, step: int = -1):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    dropout: Optional[float] = None
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None
    restore_best: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class Adam:
    """Adam with bias correction and decoupled weight decay.

    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient for parameter {p.name or p.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data -= update.astype(p.data.dtype, copy=False)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# -- data ----------------------------------------------------------------------

class ArrayDataset:
    """Fixed-length samples stacked in one array."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray):
        if len(inputs) != len(targets):
            raise ValueError("inputs and targets differ in length")
        self.inputs = np.asarray(inputs)
        self.targets = np.asarray(targets)

    def __len__(self) -> int:
        return len(self.inputs)

    def lengths(self) -> Optional[np.ndarray]:
        return None

    def batch(self, idx: np.ndarray):
        return self.inputs[idx], self.targets[idx]


class SequenceDataset:
    """Variable-length token sequences (or sequence pairs) with integer labels.

    Batches only ever mix sequences of equal length, so no padding is needed.
    """

    def __init__(self, seqs: Sequence, labels: Sequence[int], pairs: bool = False):
        if len(seqs) != len(labels):
            raise ValueError("sequences and labels differ in length")
        self.pairs = pairs
        if pairs:
            self.seqs = [(np.asarray(a, np.int64), np.asarray(b, np.int64)) for a, b in seqs]
        else:
            self.seqs = [np.asarray(s, np.int64) for s in seqs]
        self.labels = np.asarray(labels, np.int64)

    def __len__(self) -> int:
        return len(self.seqs)

    def lengths(self) -> np.ndarray:
        if self.pairs:
            return np.array([len(a) * 100003 + len(b) for a, b in self.seqs])
        return np.array([len(s) for s in self.seqs])

    def batch(self, idx: np.ndarray):
        if self.pairs:
            a = np.stack([self.seqs[i][0] for i in idx])
            b = np.stack([self.seqs[i][1] for i in idx])
            return (a, b), self.labels[idx]
        return np.stack([self.seqs[i] for i in idx]), self.labels[idx]


def make_batches(dataset, batch_size: int, rng: Optional[np.random.Generator] = None):
    """Index batches; shuffled within equal-length buckets and across batches when ``rng`` is given."""
    lengths = dataset.lengths()
    n = len(dataset)
    if lengths is None:
        order = rng.permutation(n) if rng is not None else np.arange(n)
        return [order[i : i + batch_size] for i in range(0, n, batch_size)]
    batches = []
    for length in np.unique(lengths):
        members = np.flatnonzero(lengths == length)
        if rng is not None:
            members = rng.permutation(members)
        batches.extend(members[i : i + batch_size] for i in range(0, len(members), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsLog:
    """Line-delimited JSON records ``{epoch, split, metric, value}``."""

    streams: list[TextIO] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    context: dict = field(default_factory=dict)

    @classmethod
    def to_stdout(cls) -> "MetricsLog":
        return cls([sys.stdout])

    def emit(self, epoch: int, split: str, metric: str, value: float, **extra) -> None:
        rec = {**self.context, "epoch": epoch, "split": split, "metric": metric,
               "value": float(value), **extra}
        self.records.append(rec)
        line = json.dumps(rec, sort_keys=True)
        for s in self.streams:
            s.write(line + "\n")
            s.flush()


def _loss(model, out: Tensor, targets) -> Tensor:
    if model.config.task == "regress":
        return mse_loss(out, np.asarray(targets, dtype=out.dtype))
    return cross_entropy(out, targets)


def evaluate(model, dataset, batch_size: int = 256) -> dict[str, float]:
    """Eval-mode metrics: ``mse`` for regression, ``accuracy`` and ``loss`` otherwise."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_sq, total_n, correct, loss_sum = 0.0, 0, 0, 0.0
    for idx in make_batches(dataset, batch_size):
        x, y = dataset.batch(idx)
        out = model.forward(x, training=False).data
        if model.config.task == "regress":
            diff = out.astype(np.float64) - y
            total_sq += float((diff * diff).sum())
            total_n += diff.size
        else:
            z = out.astype(np.float64)
            z = z - z.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            loss_sum -= float(np.take_along_axis(logp, y[:, None], axis=-1).sum())
            correct += int((out.argmax(axis=-1) == y).sum())
            total_n += len(y)
    if model.config.task == "regress":
        return {"mse": total_sq / total_n}
    return {"accuracy": correct / total_n, "loss": loss_sum / total_n}


def _primary(metrics: dict[str, float]) -> tuple[str, float, bool]:
    """(name, value, higher_is_better)."""
    if "mse" in metrics:
        return "mse", metrics["mse"], False
    return "accuracy", metrics["accuracy"], True


def train(model, train_set, config: TrainConfig, eval_set=None,
          metrics: Optional[MetricsLog] = None,
          on_epoch: Optional[Callable[[int, dict], None]] = None) -> list[dict]:
    """Run the epoch loop and return the metric history.

    Each history entry holds the epoch number, mean train loss and the eval
    metrics. Epoch 0 is the untrained model. With ``restore_best`` the
    parameters with the best eval metric are put back at the end.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    metrics = metrics or MetricsLog()
    eval_set = eval_set if eval_set is not None else train_set
    if config.dropout is not None:
        model.config.dropout = config.dropout
    model.dropout_rng = np.random.default_rng([config.seed, 2])
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)

    history = []
    first = evaluate(model, eval_set)
    for k, v in first.items():
        metrics.emit(0, "eval", k, v)
    history.append({"epoch": 0, "train_loss": None, **first})
    name, best_val, higher = _primary(first)
    best_params = [p.data.copy() for p in params]
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        losses = []
        for step, idx in enumerate(make_batches(train_set, config.batch_size, rng)):
            x, y = train_set.batch(idx)
            out = model.forward(x, training=True)
            loss = _loss(model, out, y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"loss became {lv} at epoch {epoch}, step {step}", epoch, step)
            for p in params:
                p.grad = None
            loss.backward()
            if config.clip_norm is not None:
                clip_grad_norm(params, config.clip_norm)
            try:
                opt.step()
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}", epoch, step) from None
            losses.append(lv)
        ev = evaluate(model, eval_set)
        train_loss = float(np.mean(losses))
        metrics.emit(epoch, "train", "loss", train_loss)
        for k, v in ev.items():
            metrics.emit(epoch, "eval", k, v)
        history.append({"epoch": epoch, "train_loss": train_loss, **ev})
        if on_epoch is not None:
            on_epoch(epoch, ev)
        _, val, _ = _primary(ev)
        if (val > best_val) if higher else (val < best_val):
            best_val, best_epoch = val, epoch
            best_params = [p.data.copy() for p in params]
        log.debug("epoch %d train_loss %.6g %s %.6g", epoch, train_loss, name, val)

    if config.restore_best:
        for p, data in zip(params, best_params):
            p.data = data
    if history:
        history[-1]["best_epoch"] = best_epoch
    return history

