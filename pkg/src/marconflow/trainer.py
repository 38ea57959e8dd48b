"""njNLL training with Adam, validation-based model selection and grid search."""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .model import ModelConfig, MosesModel
from .series import Batch, TimeSeriesInstance, make_batches


class TrainingDiverged(gc.NumericalError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    max_steps: int | None = None
    patience: int = 10
    seed: int = 0
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("invalid training configuration")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_njnll: float
    val_njnll: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_njnll: float | None = None
    step_losses: list[float] = field(default_factory=list)

    def to_dict(self, include_timing: bool = True) -> dict:
        doc = asdict(self)
        if not include_timing:
            for rec in doc["epochs"]:
                rec.pop("seconds")
        return doc

    def to_json(self, path, include_timing: bool = True) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_timing), fh, indent=2)


def njnll_loss(model: MosesModel, batch: Batch, xp=gc.TAPED):
    """Mean over instances of ``-log p(y | Q, X) / |y|``."""
    if batch.size == 0:
        raise ValueError("empty batch")
    joint, _, _ = model.batch_log_density(batch, xp=xp)
    sizes = batch.qry_mask.sum(axis=1).astype(np.float64)
    per_instance = -1.0 * joint / sizes
    values = xp.value(per_instance)
    if not np.all(np.isfinite(values)):
        bad = [batch.ids[i] for i in np.flatnonzero(~np.isfinite(values))]
        raise gc.NumericalError(f"non-finite loss for instances {bad}")
    return xp.sum(per_instance) * (1.0 / batch.size)


def evaluate_njnll(model: MosesModel, instances: Sequence[TimeSeriesInstance], batch_size: int = 256) -> float:
    total = 0.0
    for batch in make_batches(instances, batch_size, shuffle=False):
        total += float(njnll_loss(model, batch, xp=gc.PLAIN)) * batch.size
    return total / len(instances)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def train_step(model: MosesModel, batch: Batch, state: gc.AdamState, cfg: TrainConfig) -> float:
    params = model.trainable()
    with gc.Tape(params) as tape:
        loss = njnll_loss(model, batch)
    grads = gc.backward(tape, loss)
    if cfg.grad_clip is not None:
        grads = _clip(grads, cfg.grad_clip)
    gc.adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return float(loss.data)


def epoch_batches(train: Sequence[TimeSeriesInstance], cfg: TrainConfig, epoch: int) -> list[Batch]:
    return make_batches(train, cfg.batch_size, seed=cfg.seed + 7919 * epoch, shuffle=True)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    adam: gc.AdamState
    next_epoch: int = 0
    best_val: float = math.inf
    best_epoch: int | None = None
    stale: int = 0

    def to_manifest(self) -> dict:
        return {"next_epoch": self.next_epoch, "best_val": self.best_val if math.isfinite(self.best_val) else None,
                "best_epoch": self.best_epoch, "stale": self.stale}

    @classmethod
    def from_manifest(cls, doc: dict, adam: gc.AdamState) -> "TrainState":
        best = doc.get("best_val")
        return cls(adam, doc["next_epoch"], math.inf if best is None else best, doc.get("best_epoch"), doc["stale"])


def train(
    model: MosesModel,
    train_set: Sequence[TimeSeriesInstance],
    val_set: Sequence[TimeSeriesInstance],
    cfg: TrainConfig,
    state: TrainState | None = None,
    best: MosesModel | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[MosesModel, TrainReport]:
    """Train ``model`` in place; return a copy of the best-validation model and the report.

    Epoch ``e`` shuffles with seed ``cfg.seed + 7919 e`` and ``state`` is
    updated in place, so a run resumed from a saved state (and its best model)
    replays exactly the steps an uninterrupted run would take.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be nonempty")
    report = TrainReport()
    best = model.copy() if best is None else best
    if cfg.max_epochs == 0:
        return best, report
    if state is None:
        state = TrainState(gc.adam_init(model.trainable()))
    report.best_epoch = state.best_epoch
    report.best_val_njnll = state.best_val if math.isfinite(state.best_val) else None
    steps = 0
    first = state.next_epoch
    for epoch in range(first, first + cfg.max_epochs):
        if state.stale >= cfg.patience:
            break
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for batch in epoch_batches(train_set, cfg, epoch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            try:
                loss = train_step(model, batch, state.adam, cfg)
            except gc.NumericalError as exc:
                raise TrainingDiverged(f"training diverged at step {state.adam.step + 1}: {exc}") from exc
            report.step_losses.append(loss)
            total += loss * batch.size
            seen += batch.size
            steps += 1
        if seen == 0:
            break
        val = evaluate_njnll(model, val_set)
        rec = EpochRecord(epoch, state.adam.step, total / seen, val, time.perf_counter() - t0)
        report.epochs.append(rec)
        state.next_epoch = epoch + 1
        if log is not None:
            log(f"epoch {epoch} step {state.adam.step} train_njnll {rec.train_njnll:.6f} val_njnll {val:.6f}")
        if val < state.best_val:
            state.best_val, state.best_epoch, state.stale = val, epoch, 0
            best = model.copy()
            report.best_epoch, report.best_val_njnll = epoch, val
        else:
            state.stale += 1
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    return best, report


# -- grid search -------------------------------------------------------------------

DEFAULT_GRID = {
    "components": [1, 2, 5, 7, 10],
    "heads": [1, 2, 4],
    "latent": [16, 32, 64, 128],
    "pos_dim": [16, 32, 64, 128],
}


def grid_points(grid: Mapping[str, Sequence]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(sorted(grid[k]) for k in keys))]


def select_best(results: Sequence[tuple[dict, float]]) -> dict:
    """Minimal score; ties go to the lexicographically smallest configuration."""
    if not results:
        raise ValueError("no results to select from")

    def key(item):
        point, score = item
        return (score, tuple(point[k] for k in sorted(point)))

    return dict(min(results, key=key)[0])


def grid_select(
    train_set: Sequence[TimeSeriesInstance],
    val_set: Sequence[TimeSeriesInstance],
    grid: Mapping[str, Sequence],
    budget: TrainConfig,
    base: ModelConfig,
    log: Callable[[str], None] | None = None,
) -> tuple[dict, list[tuple[dict, float]]]:
    points = grid_points(grid)
    if not points:
        raise ValueError("grid is empty")
    results = []
    for i, point in enumerate(points):
        cfg = replace(base, **point)
        run = replace(budget, seed=budget.seed + i)
        model = MosesModel(cfg, seed=run.seed)
        _, report = train(model, train_set, val_set, run)
        score = report.best_val_njnll if report.best_val_njnll is not None else evaluate_njnll(model, val_set)
        results.append((point, score))
        if log is not None:
            log(f"grid {point} val_njnll {score:.4f}")
    return select_best(results), results
