"""Downstream heads, the training loop, learning-rate grid search and low-resource sweeps."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .accounting import PetModel, PetStrategy, apply_strategy, count_params, derive_rng
from .backbone import Backbone
from .synth import Dataset
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)

HEADS = ("mean-pool-linear", "weighted-sum-then-mean-pool-linear")
OPTIMIZERS = ("adam", "sgd")
DEFAULT_LR_GRID = (1e-3, 1e-4, 1e-5)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    epochs: int = 50
    batch_size: int = 8
    optimizer: str = "adam"
    seed: int = 0
    subset_fraction: float = 1.0
    mode: str = "train-32bit"

    def __post_init__(self):
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))
        if not self.lr_grid:
            raise ConfigError("lr_grid must not be empty")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 < self.subset_fraction <= 1:
            raise ConfigError(f"subset_fraction must be in (0, 1], got {self.subset_fraction}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class RunRecord:
    strategy: str
    kind: str
    lr: float
    seed: int
    subset_fraction: float
    epochs: int
    batch_size: int
    optimizer: str
    trainable_total: int
    head_params: int
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    test_acc: float = 0.0
    train_acc: float = 0.0
    wall_time: float = 0.0

    @property
    def gap(self) -> float:
        return self.train_acc - self.test_acc

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- task model

class TaskModel:
    """A PET model with a mean-pooled linear classifier on top."""

    def __init__(self, pet: PetModel, head_w: Tensor, head_b: Tensor, head: str):
        self.pet = pet
        self.head_w = head_w
        self.head_b = head_b
        self.head = head

    def logits(self, waves: Tensor) -> Tensor:
        rep = self.pet.representation(waves)
        pooled = T.mean(rep, axis=-2)
        return T.linear(pooled, self.head_w, self.head_b)

    def head_parameters(self) -> list[Tensor]:
        return [self.head_w, self.head_b]

    def parameters(self) -> list[Tensor]:
        return self.pet.parameters() + self.head_parameters()

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.parameters() if t.trainable]

    def frozen_parameters(self) -> list[Tensor]:
        return [t for t in self.parameters() if not t.trainable]

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.logits(T.tensor(x[i:i + batch_size])).data.argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y)) if len(y) else float("nan")


def attach_head(pet: PetModel, n_classes: int, head: str | None = None, seed: int = 0) -> TaskModel:
    """Head init depends only on ``seed``, so strategies share identical heads."""
    wants_wsum = pet.wsum is not None
    head = head or HEADS[int(wants_wsum)]
    if head not in HEADS:
        raise ConfigError(f"head must be one of {HEADS}")
    if (head == HEADS[1]) != wants_wsum:
        raise ConfigError(f"head {head!r} does not fit strategy {pet.strategy.kind!r}")
    hidden = pet.backbone.config.hidden
    rng = derive_rng(seed, "head")
    dt = T.get_dtype()
    w = Tensor((rng.standard_normal((hidden, n_classes)) / math.sqrt(hidden)).astype(dt), True, "head.w")
    b = Tensor(np.zeros(n_classes, dt), True, "head.b")
    return TaskModel(pet, w, b, head)


# ---------------------------------------------------------------- optimizers

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.trainable:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        self.params = [p for p in params if p.trainable]
        self.lr, self.momentum = lr, momentum
        self.vel = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.vel):
            if p.grad is None or not p.trainable:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params, lr: float):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


# ---------------------------------------------------------------- training

def build_task(backbone: Backbone, strategy: PetStrategy, n_classes: int, seed: int) -> TaskModel:
    pet, _ = apply_strategy(backbone, strategy, seed)
    return attach_head(pet, n_classes, seed=seed)


def train(task: TaskModel, dataset: Dataset, config: TrainConfig, lr: float | None = None) -> RunRecord:
    """Train the trainable tensors of ``task``; test accuracy is read once, at the best-val epoch."""
    lr = config.lr_grid[0] if lr is None else lr
    data = dataset.subset(config.subset_fraction)
    dt = task.head_w.data.dtype
    x_tr = data.x_train.astype(dt)
    rec = RunRecord(
        strategy=task.pet.strategy.label, kind=task.pet.strategy.kind, lr=lr, seed=config.seed,
        subset_fraction=config.subset_fraction, epochs=config.epochs, batch_size=config.batch_size,
        optimizer=config.optimizer,
        trainable_total=count_params(task.pet, "all").trainable_total,
        head_params=sum(t.size for t in task.head_parameters()))
    params = task.trainable_parameters()
    opt = make_optimizer(config.optimizer, params, lr)
    shuffle = derive_rng(config.seed, "shuffle")
    start = time.perf_counter()

    def snapshot():
        return [p.data.copy() for p in params]

    best_val = task.accuracy(data.x_val.astype(dt), data.y_val)
    best_state, best_epoch = snapshot(), 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(data.y_train))
        total, seen = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad()
            where = f"step {step} (epoch {epoch}, lr {lr:g})"
            try:
                loss = T.softmax_cross_entropy(task.logits(T.tensor(x_tr[idx])), data.y_train[idx])
            except T.NumericError as e:
                raise TrainingError(f"non-finite loss at {where}: {e}") from e
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at {where}")
            loss.backward()
            opt.step()
            step += 1
            total += value * len(idx)
            seen += len(idx)
        rec.train_loss.append(total / max(seen, 1))
        acc = task.accuracy(data.x_val.astype(dt), data.y_val)
        rec.val_acc.append(acc)
        log.debug("%s lr=%g epoch %d loss %.4f val %.3f", rec.strategy, lr, epoch, rec.train_loss[-1], acc)
        if acc > best_val:
            best_val, best_state, best_epoch = acc, snapshot(), epoch
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    rec.best_epoch = best_epoch
    rec.best_val_acc = best_val
    rec.test_acc = task.accuracy(data.x_test.astype(dt), data.y_test)
    rec.train_acc = task.accuracy(x_tr, data.y_train)
    rec.wall_time = time.perf_counter() - start
    return rec


def run_one(backbone: Backbone, strategy: PetStrategy, dataset: Dataset, config: TrainConfig,
            lr: float) -> RunRecord:
    with T.precision(config.mode):
        bb = backbone if backbone.params[next(iter(backbone.params))].data.dtype == T.get_dtype() \
            else backbone.astype(T.get_dtype())
        task = build_task(bb, strategy, dataset.n_classes, config.seed)
        return train(task, dataset, config, lr)


def pick_best(records: Sequence[RunRecord]) -> RunRecord:
    """Highest validation accuracy; ties go to the smaller learning rate."""
    return min(records, key=lambda r: (-r.best_val_acc, r.lr))


def lr_grid_search(backbone: Backbone, strategy: PetStrategy, dataset: Dataset,
                   config: TrainConfig) -> tuple[RunRecord, list[RunRecord]]:
    records = [run_one(backbone, strategy, dataset, config, lr) for lr in config.lr_grid]
    return pick_best(records), records


# ---------------------------------------------------------------- sweep

@dataclass
class SweepCell:
    strategy: str
    fraction: float
    seed: int
    best: RunRecord
    records: list[RunRecord]


def _cell_job(args):
    backbone, strategy, dataset, config = args
    best, records = lr_grid_search(backbone, strategy, dataset, config)
    return strategy.label, config.subset_fraction, config.seed, best, records


def low_resource_sweep(backbone: Backbone, strategies: Sequence[PetStrategy], dataset: Dataset,
                       config: TrainConfig, fractions: Sequence[float] = (1.0, 0.5, 0.25, 0.1),
                       seeds: Sequence[int] = (0, 1, 2), jobs: int = 1) -> tuple[list[SweepCell], list[dict]]:
    """Grid-search every (strategy, fraction, seed) cell; return cells and a mean/sd summary table."""
    for f in fractions:
        dataset.subset(f)  # validates before any training starts
    jobs_args = [(backbone, s, dataset, replace(config, subset_fraction=f, seed=seed))
                 for s in strategies for f in fractions for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, jobs_args))
    else:
        results = [_cell_job(a) for a in jobs_args]
    cells = [SweepCell(*r) for r in results]
    return cells, summarize(cells)


def summarize(cells: Sequence[SweepCell]) -> list[dict]:
    groups: dict[tuple[str, float], list[SweepCell]] = {}
    for c in cells:
        groups.setdefault((c.strategy, c.fraction), []).append(c)
    rows = []
    for (strategy, fraction), group in groups.items():
        acc = np.array([c.best.test_acc for c in group])
        gap = np.array([c.best.gap for c in group])
        ddof = 1 if len(group) > 1 else 0
        rows.append({
            "strategy": strategy, "fraction": fraction, "n_seeds": len(group),
            "trainable_total": group[0].best.trainable_total,
            "test_acc_mean": float(acc.mean()), "test_acc_sd": float(acc.std(ddof=ddof)),
            "gap_mean": float(gap.mean()), "gap_sd": float(gap.std(ddof=ddof)),
        })
    return rows
