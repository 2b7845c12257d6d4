"""Iteration-based SGD training for one TP, with EMA evaluation and best-checkpoint selection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from leco.losses import Batch, LossSpec, total_loss
from leco.metrics import evaluate_at_level
from leco.model import InitStrategy, Model, NonFiniteError, ema_update, init_for_tp, sgd_step
from leco.ontology import Taxonomy
from leco.synthdata import Augmentation, TPDatasets

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "iteration",
    "lr",
    "loss_total",
    "loss_base",
    "loss_ssl",
    "loss_joint",
    "loss_lpl",
    "val_mAcc",
    "best_val_mAcc",
    "pl_accept_rate",
    "condition_skipped",
)


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 5000
    eval_every: int = 250
    batch_new: int = 64
    batch_old: int = 64
    base_lr: float = 0.1
    lr_grid: tuple[float, ...] = (0.3, 0.1, 0.03)
    weight_decay: float = 1e-4
    wd_grid: tuple[float, ...] = (1e-3, 1e-4)
    momentum: float = 0.9
    ema_decay: float = 0.999
    seed: int = 0
    augment: str = "strong"
    eval_use_ema: bool = True
    hidden: tuple[int, ...] = (128, 128)
    debug: bool = False

    def __post_init__(self):
        if self.total_iterations <= 0:
            raise ValueError("total_iterations must be positive")
        if self.eval_every <= 0:
            raise ValueError("eval_every must be positive")
        if self.batch_new < 0 or self.batch_old < 0 or self.batch_new + self.batch_old == 0:
            raise ValueError("batch sizes must be nonnegative and not both zero")
        if self.augment not in ("none", "weak", "strong"):
            raise ValueError(f"unknown augmentation {self.augment!r}")
        for name in ("lr_grid", "wd_grid", "hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in ("lr_grid", "wd_grid", "hidden"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_val: float = float("-inf")
    iterations: int = 0
    phase: str = "train"

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in LOG_COLUMNS})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def cosine_lr(k: int, total: int, eta: float) -> float:
    """``eta * cos(7 pi k / (16 K))`` for ``0 <= k <= K``."""
    if total <= 0:
        raise ValueError("total iterations must be positive")
    if not 0 <= k <= total:
        raise ValueError(f"iteration {k} outside [0, {total}]")
    return eta * math.cos(7.0 * math.pi * k / (16.0 * total))


def compose_batch(
    datasets: TPDatasets,
    tp: int | None,
    k: int,
    m: int,
    rng: np.random.Generator,
) -> tuple[Batch, Batch]:
    """Uniform with-replacement draws of ``k`` samples from S^t and ``m`` from S^{1:t-1}."""
    tp = datasets.tp if tp is None else tp
    if tp != datasets.tp:
        raise ValueError(f"datasets are for TP {datasets.tp}, not {tp}")
    pool = datasets.pool
    dim = pool.features.shape[1]
    if tp == 0:
        m = 0
    if k > 0 and not len(datasets.train_new):
        raise ValueError(f"no fine-labeled training data at TP {tp}")
    if m > 0 and not len(datasets.history):
        raise ValueError(f"B_M of size {m} requested but TP {tp} has no old-ontology data")
    if k > 0:
        idx = datasets.train_new[rng.integers(0, len(datasets.train_new), size=k)]
        new = Batch(pool.features[idx], pool.labels[idx, tp], tp, pool.excluded[idx])
    else:
        new = Batch.empty(dim)
    if m > 0:
        idx = datasets.history[rng.integers(0, len(datasets.history), size=m)]
        y, levels = datasets.visible_labels(idx)
        old = Batch(pool.features[idx], y, levels, pool.excluded[idx])
    else:
        old = Batch.empty(dim)
    return new, old


def batch_sizes(spec: LossSpec, cfg: TrainConfig, tp: int) -> tuple[int, int]:
    """Runs that do not touch old data spend the whole batch on B_K."""
    if tp == 0 or not spec.uses_old_data:
        return cfg.batch_new + cfg.batch_old, 0
    return cfg.batch_new, cfg.batch_old


def validation_macc(model: Model, datasets: TPDatasets, taxonomy: Taxonomy, use_ema: bool = True) -> float:
    pool, tp = datasets.pool, datasets.tp
    if not len(datasets.val):
        raise ValueError(f"TP {tp} has no validation samples")
    idx = datasets.val
    return evaluate_at_level(model, pool.features[idx], pool.labels[idx, tp], taxonomy, tp, use_ema, label_level=tp)


def train_tp(
    model: Model,
    datasets: TPDatasets,
    spec: LossSpec,
    cfg: TrainConfig,
    taxonomy: Taxonomy,
    *,
    teacher: Model | None = None,
    aug: Augmentation | None = None,
    rng_key: Sequence[int] = (),
    log_path: str | Path | None = None,
) -> tuple[Model, TrainLog]:
    """Train ``model`` in place for ``cfg.total_iterations`` and return a copy of the best checkpoint.

    The checkpoint with the highest validation mAcc (EMA weights unless
    ``cfg.eval_use_ema`` is off) wins; later evaluations must beat it strictly.
    """
    tp = datasets.tp
    if model.level != tp:
        raise ValueError(f"model's finest head is level {model.level}, TP is {tp}")
    rng = np.random.default_rng([cfg.seed, tp, *rng_key])
    k_new, m_old = batch_sizes(spec, cfg, tp)
    view = cfg.augment if aug is not None else "none"
    frozen_ref = None
    if cfg.debug and model.frozen_extractor:
        frozen_ref = {n: model.params[n].copy() for n in model.extractor_names()}

    trace = TrainLog()
    best = model.copy()
    window: dict[str, list[float]] = {}
    considered = accepted = skipped = 0
    edges_cache: dict = {}
    total = cfg.total_iterations

    for k in range(total):
        lr = cosine_lr(k, total, cfg.base_lr)
        batch_new, batch_old = compose_batch(datasets, tp, k_new, m_old, rng)
        res = total_loss(spec, model, teacher, batch_new, batch_old, taxonomy, rng, aug=aug, view=view, edges=edges_cache)
        if not math.isfinite(res.value):
            raise NonFiniteError(f"non-finite loss {res.value} at TP {tp}, iteration {k} (terms {res.terms})")
        sgd_step(model, res.grads, lr, cfg.momentum, cfg.weight_decay)
        ema_update(model, cfg.ema_decay)
        window.setdefault("total", []).append(res.value)
        for name, v in res.terms.items():
            window.setdefault(name, []).append(v)
        considered += res.pl_considered
        accepted += res.pl_accepted
        skipped += res.condition_skipped

        if frozen_ref is not None:
            for n, ref in frozen_ref.items():
                if not np.array_equal(model.params[n], ref):
                    raise AssertionError(f"frozen parameter {n} changed at iteration {k}")

        if (k + 1) % cfg.eval_every == 0 or k + 1 == total:
            val = validation_macc(model, datasets, taxonomy, cfg.eval_use_ema)
            if val > trace.best_val:
                trace.best_val, trace.best_iteration = val, k + 1
                best = model.copy()
            trace.rows.append(
                {
                    "iteration": k + 1,
                    "lr": lr,
                    "loss_total": float(np.mean(window["total"])),
                    "loss_base": _mean(window.get("base")),
                    "loss_ssl": _mean(window.get("ssl")),
                    "loss_joint": _mean(window.get("joint")),
                    "loss_lpl": _mean(window.get("lpl")),
                    "val_mAcc": val,
                    "best_val_mAcc": trace.best_val,
                    "pl_accept_rate": accepted / considered if considered else None,
                    "condition_skipped": skipped,
                }
            )
            log.debug("tp=%d it=%d lr=%.4g loss=%.4f val=%.4f", tp, k + 1, lr, trace.rows[-1]["loss_total"], val)
            window = {}
            considered = accepted = 0
    trace.iterations = total
    best.velocity = {}
    if log_path is not None:
        trace.to_csv(log_path)
    return best, trace


def _mean(values):
    return float(np.mean(values)) if values else None


def train_teacher_student(
    datasets: TPDatasets,
    spec: LossSpec,
    cfg: TrainConfig,
    prev_model: Model,
    taxonomy: Taxonomy,
    *,
    aug: Augmentation | None = None,
    teacher: Model | None = None,
    rng_key: Sequence[int] = (),
) -> tuple[Model, Model, TrainLog, TrainLog | None]:
    """Self-training: a teacher fit on S^t with the base loss, then a student distilled from it.

    Both start from ``prev_model`` and each phase gets the full iteration
    budget. Pass a previously trained ``teacher`` to skip phase one.
    Returns ``(student, teacher, student_log, teacher_log)``.
    """
    if not spec.needs_teacher:
        raise ValueError("teacher-student training needs ST-Hard or ST-Soft")
    if prev_model is None:
        raise ValueError("teacher-student training starts from the previous TP's model")
    tp = datasets.tp
    new_size = taxonomy.level_sizes[tp]
    teacher_log = None
    if teacher is None:
        init_rng = np.random.default_rng([cfg.seed, tp, *rng_key, 1])
        t_model = init_for_tp(prev_model, InitStrategy.FINETUNE_PREV, new_size, init_rng)
        teacher, teacher_log = train_tp(
            t_model, datasets, spec.base_only(), cfg, taxonomy, aug=aug, rng_key=(*rng_key, 1)
        )
        teacher_log.phase = "teacher"
    init_rng = np.random.default_rng([cfg.seed, tp, *rng_key, 2])
    student = init_for_tp(prev_model, InitStrategy.FINETUNE_PREV, new_size, init_rng)
    student, student_log = train_tp(
        student, datasets, spec, cfg, taxonomy, teacher=teacher, aug=aug, rng_key=(*rng_key, 2)
    )
    student_log.phase = "student"
    return student, teacher, student_log, teacher_log
