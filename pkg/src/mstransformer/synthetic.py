"""Mirrored summation: target = sum_{i<K} a_i * a_{N-1-i} over U[0,1) vectors.

Generation is chunked: chunk ``c`` of split ``s`` draws from
``numpy.random.default_rng([seed, s, c])`` (PCG64), so output does not
depend on how many workers produce the chunks.
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import Model, ModelConfig
from .serialize import load_tensors, save_tensors
from .training import ArrayDataset, MetricsLog, TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger(__name__)

CHUNK = 1024
TRAIN_SPLIT, TEST_SPLIT = 0, 1


def mirrored_targets(inputs: np.ndarray, k: int) -> np.ndarray:
    """``(count, N, d) -> (count, d)``."""
    n = inputs.shape[-2]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    head = inputs[..., :k, :]
    tail = inputs[..., n - k :, :][..., ::-1, :]
    return (head * tail).sum(axis=-2)


@dataclass
class MirroredData:
    n: int
    d: int
    k: int
    seed: int
    split: int
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def as_dataset(self, dtype=np.float64) -> ArrayDataset:
        return ArrayDataset(self.inputs.astype(dtype), self.targets.astype(dtype))

    def save(self, path) -> None:
        header = np.array([self.n, self.d, self.k, len(self), self.seed, self.split], dtype=np.int64)
        save_tensors(path, {"header": header, "inputs": self.inputs, "targets": self.targets})

    @classmethod
    def load(cls, path) -> "MirroredData":
        t = load_tensors(path)
        n, d, k, count, seed, split = (int(v) for v in t["header"])
        data = cls(n, d, k, seed, split, t["inputs"], t["targets"])
        if len(data) != count or data.inputs.shape[1:] != (n, d):
            raise ValueError(f"{path}: header does not match stored tensors")
        return data


def gen_dataset(n: int, d: int, k: int, count: int, seed: int, split: int = TRAIN_SPLIT) -> MirroredData:
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    if d < 1 or count < 0:
        raise ValueError("d must be >= 1 and count >= 0")
    chunks = []
    for c, start in enumerate(range(0, count, CHUNK)):
        rng = np.random.default_rng([seed, split, c])
        chunks.append(rng.random((min(CHUNK, count - start), n, d)))
    inputs = np.concatenate(chunks) if chunks else np.zeros((0, n, d))
    return MirroredData(n, d, k, seed, split, inputs, mirrored_targets(inputs, k))


def gen_splits(n: int, d: int, k: int, n_train: int, n_test: int, seed: int):
    """Train and test sets from disjoint generator streams."""
    return (gen_dataset(n, d, k, n_train, seed, TRAIN_SPLIT),
            gen_dataset(n, d, k, n_test, seed, TEST_SPLIT))


def trivial_mse(k: int) -> float:
    """Variance of a sum of ``k`` independent products of two U(0,1) draws.

    ``Var(XY) = E[X^2]E[Y^2] - (E[X]E[Y])^2 = 1/9 - 1/16 = 7/144``. This is the
    MSE of predicting the mean when the ``k`` pairs are disjoint (``2k <= N``).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    return 7.0 * k / 144.0


def mean_predictor_mse(n: int, k: int) -> float:
    """Exact MSE of the constant-mean predictor for any ``1 <= k <= n``.

    Once ``k > n/2`` mirrored pairs repeat (each distinct pair counted twice)
    and, for odd ``n``, the middle element contributes ``a^2`` with
    ``Var(a^2) = 1/5 - 1/9 = 4/45``.
    """
    var = 0.0
    seen = set()
    for i in range(k):
        j = n - 1 - i
        if i == j:
            var += 4.0 / 45.0
            continue
        pair = (min(i, j), max(i, j))
        if pair in seen:
            continue
        seen.add(pair)
        mult = 2 if (i < k and j < k) else 1
        var += mult * mult * 7.0 / 144.0
    return var


# -- the experiment harness ----------------------------------------------------

MODEL_NAMES = ("hier", "deephier", "flex", "trans")


def grid_configs(d: int, d_model: int = 20, head_dim: int = 4, heads: int = 10,
                 dtype: str = "float32") -> dict[str, ModelConfig]:
    """Hier-S, deepHier-S, Flex and a vanilla baseline for vector inputs of width ``d``."""
    base = ModelConfig(
        kind="ms", n_heads=heads, d_model=d_model, head_dim=head_dim, input_dim=d,
        task="regress", out_dim=d, use_cls=True, dtype=dtype, scales="3", n_layers=2,
    )
    return {
        "hier": replace(base, scales="3", n_layers=2),
        "deephier": replace(base, scales="3", n_layers=6),
        "flex": replace(base, scales="3,N/16,N/8,N/4,N/2", n_layers=2, alpha=0.0),
        "trans": replace(base, kind="vanilla", n_layers=2, use_positional=True, ffn=True),
    }


@dataclass
class GridSettings:
    n: int = 40
    d: int = 10
    ks: tuple = (10, 20, 30, 40)
    n_train: int = 20000
    n_test: int = 5000
    seeds: tuple = (0, 1, 2)
    models: tuple = MODEL_NAMES
    d_model: int = 20
    head_dim: int = 4
    heads: int = 10
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-2
    dtype: str = "float32"


def run_cell(name: str, config: ModelConfig, data_seed: int, settings: GridSettings, k: int,
             metrics: Optional[MetricsLog] = None) -> dict:
    tr, te = gen_splits(settings.n, settings.d, k, settings.n_train, settings.n_test, data_seed)
    dt = np.dtype(settings.dtype)
    model = Model(config, seed=data_seed)
    tc = TrainConfig(lr=settings.lr, batch_size=settings.batch_size, epochs=settings.epochs,
                     seed=data_seed, restore_best=False)
    t0 = time.perf_counter()
    row = {"K": k, "model": name, "seed": data_seed}
    try:
        train(model, tr.as_dataset(dt), tc, eval_set=_EvalSubset(te.as_dataset(dt)),
              metrics=metrics)
        row["test_mse"] = evaluate(model, te.as_dataset(dt))["mse"]
        row["status"] = "ok"
    except TrainingDiverged as exc:
        row["test_mse"] = float("nan")
        row["status"] = f"diverged: {exc}"
    row["seconds"] = time.perf_counter() - t0
    return row


class _EvalSubset(ArrayDataset):
    """Per-epoch monitoring on the first 1000 test samples."""

    def __init__(self, ds: ArrayDataset, size: int = 1000):
        super().__init__(ds.inputs[:size], ds.targets[:size])


def run_grid(settings: GridSettings, metrics: Optional[MetricsLog] = None,
             progress: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Train every (model, K, seed) cell; rows carry ``K, model, seed, test_mse``."""
    configs = grid_configs(settings.d, settings.d_model, settings.head_dim, settings.heads,
                           settings.dtype)
    unknown = set(settings.models) - set(configs)
    if unknown:
        raise ValueError(f"unknown model names {sorted(unknown)}; choose from {MODEL_NAMES}")
    rows = []
    for k in settings.ks:
        if not 1 <= k <= settings.n:
            raise ValueError(f"K={k} outside 1..N={settings.n}")
        for name in settings.models:
            for seed in settings.seeds:
                if metrics is not None:
                    metrics.context = {"model": name, "K": k, "seed": seed}
                row = run_cell(name, configs[name], seed, settings, k, metrics)
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def median_table(rows: Sequence[dict]) -> list[dict]:
    """Median test MSE over seeds for every (K, model)."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["K"], r["model"]), []).append(r["test_mse"])
    return [{"K": k, "model": m, "test_mse": statistics.median(v)} for (k, m), v in cells.items()]


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] = ("K", "model", "test_mse")) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def format_table(rows: Sequence[dict]) -> str:
    ks = sorted({r["K"] for r in rows})
    models = list(dict.fromkeys(r["model"] for r in rows))
    val = {(r["K"], r["model"]): r["test_mse"] for r in rows}
    lines = ["K".rjust(4) + "".join(m.rjust(12) for m in models) + "  floor(7K/144)".rjust(16)]
    for k in ks:
        cells = "".join(f"{val.get((k, m), float('nan')):12.5f}" for m in models)
        lines.append(f"{k:4d}{cells}{trivial_mse(k):16.5f}")
    return "\n".join(lines)
