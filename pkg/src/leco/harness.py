"""Config-driven multi-TP experiments: data, strategies, training, result tables."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import jsonschema
import numpy as np

from leco.losses import LossSpec
from leco.metrics import evaluate_at_level
from leco.model import InitStrategy, Model, init_for_tp
from leco.ontology import Taxonomy
from leco.synthdata import (
    Annotation,
    Augmentation,
    HierarchicalGaussianSpec,
    Pool,
    apply_annotation_strategy,
    generate_pool,
)
from leco.trainer import TrainConfig, train_teacher_student, train_tp

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


_LOSS_SCHEMA = {
    "type": "object",
    "properties": {
        "use_base": {"type": "boolean"},
        "ssl": {"enum": ["none", "ST-Hard", "ST-Soft", "PL", "FixMatch"]},
        "refinement": {"enum": ["none", "Filter", "Condition"]},
        "use_joint": {"type": "boolean"},
        "use_lpl": {"type": "boolean"},
        "apply_coarse_on_new": {"type": "boolean"},
        "pl_threshold": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "fixmatch_soft_target": {"type": "boolean"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["taxonomy", "num_tps", "budget", "arms"],
    "properties": {
        "name": {"type": "string"},
        "taxonomy": {
            "type": "object",
            "properties": {
                "branching": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "level_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "file": {"type": "string"},
                "seed": {"type": "integer", "minimum": 0},
            },
            "oneOf": [
                {"required": ["branching"]},
                {"required": ["level_sizes"]},
                {"required": ["file"]},
            ],
            "additionalProperties": False,
        },
        "data": {
            "type": "object",
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "sigma_coarse": {"type": "number", "minimum": 0},
                "sigma_fine": {"type": "number", "minimum": 0},
                "sigma_noise": {"type": "number", "exclusiveMinimum": 0},
                "tail_exponent": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "num_tps": {"type": "integer", "minimum": 1},
        "budget": {
            "oneOf": [
                {"type": "integer", "minimum": 1},
                {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            ]
        },
        "test_size": {"type": "integer", "minimum": 1},
        "train": {"type": "object"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out": {"type": "string"},
        "save_checkpoints": {"type": "boolean"},
        "arms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "annotation", "init", "loss"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "annotation": {"type": "array", "items": {"enum": [a.value for a in Annotation]}},
                    "init": {"type": "array", "items": {"enum": [s.value for s in InitStrategy]}},
                    "loss": {"type": "array", "items": _LOSS_SCHEMA},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class Arm:
    """One strategy combination: annotation, initialization and loss for every TP."""

    name: str
    annotation: tuple[Annotation, ...]
    init: tuple[InitStrategy, ...]
    loss: tuple[LossSpec, ...]

    def stage(self, tp: int) -> dict:
        return {
            "annotation": self.annotation[tp].value,
            "init": self.init[tp].value,
            "loss": self.loss[tp].to_dict(),
        }

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "annotation": [a.value for a in self.annotation],
            "init": [s.value for s in self.init],
            "loss": [s.to_dict() for s in self.loss],
        }


@dataclass(frozen=True)
class ExperimentConfig:
    taxonomy: dict
    data: HierarchicalGaussianSpec
    num_tps: int
    budget: tuple[int, ...]
    arms: tuple[Arm, ...]
    train: TrainConfig = field(default_factory=TrainConfig)
    test_size: int = 10000
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    name: str = "experiment"
    save_checkpoints: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if len(self.budget) != self.num_tps:
            raise ConfigError(f"budget has {len(self.budget)} entries for {self.num_tps} TPs")
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError("arm names must be unique")
        for arm in self.arms:
            for what in ("annotation", "init", "loss"):
                if len(getattr(arm, what)) != self.num_tps:
                    raise ConfigError(f"arm {arm.name!r}: {what} lists {len(getattr(arm, what))} TPs, expected {self.num_tps}")
            if arm.init[0] is not InitStrategy.TRAIN_SCRATCH:
                raise ConfigError(f"arm {arm.name!r}: TP 0 has no previous model, init must be TrainScratch")
            if arm.annotation[0] is Annotation.RELABEL_OLD:
                raise ConfigError(f"arm {arm.name!r}: RelabelOld is undefined at TP 0")
            for tp, (init, spec) in enumerate(zip(arm.init, arm.loss)):
                if spec.needs_teacher and (tp == 0 or init is not InitStrategy.FINETUNE_PREV):
                    raise ConfigError(f"arm {arm.name!r}: self-training at TP {tp} needs FinetunePrev after TP 0")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        num_tps = raw["num_tps"]
        budget = raw["budget"]
        budget = tuple(budget) if isinstance(budget, list) else (budget,) * num_tps
        tax = dict(raw["taxonomy"])
        if "file" in tax and base_dir is not None and not Path(tax["file"]).is_absolute():
            tax["file"] = str(Path(base_dir) / tax["file"])
        try:
            train = TrainConfig.from_dict(raw.get("train", {}))
            arms = tuple(
                Arm(
                    a["name"],
                    tuple(Annotation(v) for v in a["annotation"]),
                    tuple(InitStrategy(v) for v in a["init"]),
                    tuple(LossSpec.from_dict(d) for d in a["loss"]),
                )
                for a in raw["arms"]
            )
            data = HierarchicalGaussianSpec(**raw.get("data", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls(
            taxonomy=tax,
            data=data,
            num_tps=num_tps,
            budget=budget,
            arms=arms,
            train=train,
            test_size=raw.get("test_size", 10000),
            seeds=tuple(raw.get("seeds", [0])),
            out=raw.get("out", "runs"),
            name=raw.get("name", "experiment"),
            save_checkpoints=raw.get("save_checkpoints", True),
        )
        levels = len(cfg.build_taxonomy().level_sizes)
        if num_tps > levels:
            raise ConfigError(f"{num_tps} TPs need at least {num_tps} ontology levels, taxonomy has {levels}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        data = self.data.to_dict()
        data.pop("seed", None)
        train = self.train.to_dict()
        train.pop("seed", None)
        return {
            "name": self.name,
            "taxonomy": dict(self.taxonomy),
            "data": data,
            "num_tps": self.num_tps,
            "budget": list(self.budget),
            "test_size": self.test_size,
            "train": train,
            "seeds": list(self.seeds),
            "out": self.out,
            "save_checkpoints": self.save_checkpoints,
            "arms": [a.to_dict() for a in self.arms],
        }

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Hash of everything that determines results; seeds and output location excluded."""
        d = self.to_dict()
        for k in ("seeds", "out", "save_checkpoints", "name"):
            d.pop(k)
        return _digest(d)

    def build_taxonomy(self) -> Taxonomy:
        tax = self.taxonomy
        if "branching" in tax:
            return Taxonomy.balanced(tax["branching"])
        if "level_sizes" in tax:
            return Taxonomy.random(tax["level_sizes"], np.random.default_rng([tax.get("seed", 0), 0x7A0]))
        return Taxonomy.load(tax["file"])


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# -- results -----------------------------------------------------------------------------

RESULT_COLUMNS = (
    "arm",
    "tp",
    "seed",
    "level",
    "test_mAcc",
    "val_mAcc",
    "best_iteration",
    "fine_labeled",
    "coarse_history",
    "distinct_labeled",
)
_INT_COLUMNS = {"tp", "seed", "level", "best_iteration", "fine_labeled", "coarse_history", "distinct_labeled"}
_FLOAT_COLUMNS = {"test_mAcc", "val_mAcc"}


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    n: int

    def format(self, scale: float = 1.0) -> str:
        if self.n < 2:
            return f"{self.mean * scale:.2f}"
        return f"{self.mean * scale:.2f} ± {self.std * scale:.2f}"


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean with sample (n-1) standard deviation; NaN std for a single value."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("nothing to aggregate")
    std = float(np.std(vals, ddof=1)) if vals.size > 1 else float("nan")
    return Aggregate(float(np.mean(vals)), std, int(vals.size))


@dataclass
class ResultTable:
    """One row per (arm, TP, seed, evaluation level)."""

    rows: list[dict] = field(default_factory=list)
    seeds: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.rows)

    def arms(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            seen.setdefault(r["arm"], None)
        return list(seen)

    def tps(self) -> list[int]:
        return sorted({r["tp"] for r in self.rows})

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def value(self, arm: str, tp: int, seed: int, level: int | None = None, column: str = "test_mAcc") -> float:
        level = tp if level is None else level
        hits = self.select(arm=arm, tp=tp, seed=seed, level=level)
        if len(hits) != 1:
            raise KeyError(f"no unique row for arm={arm} tp={tp} seed={seed} level={level}")
        return hits[0][column]

    def aggregate(
        self,
        arm: str,
        tp: int,
        level: int | None = None,
        column: str = "test_mAcc",
        seeds: Iterable[int] | None = None,
    ) -> Aggregate:
        """Aggregate over the declared seeds (all seeds present when none are declared)."""
        level = tp if level is None else level
        seeds = tuple(self.seeds if seeds is None else seeds)
        rows = self.select(arm=arm, tp=tp, level=level)
        if seeds:
            by_seed = {r["seed"]: r for r in rows}
            missing = [s for s in seeds if s not in by_seed]
            if missing:
                raise KeyError(f"arm {arm} TP {tp}: no rows for seeds {missing}")
            rows = [by_seed[s] for s in seeds]
        return aggregate([r[column] for r in rows])

    def seed_mean(self, arm: str, tp: int, level: int | None = None) -> float:
        return self.aggregate(arm, tp, level).mean

    # -- serialization -------------------------------------------------------------------

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _cell(r[k]) for k in RESULT_COLUMNS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seeds: Sequence[int] | None = None) -> ResultTable:
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"unexpected result columns {reader.fieldnames}")
        rows = [_parse_row(r) for r in reader]
        return cls(rows, tuple(seeds) if seeds is not None else _seeds_of(rows))

    def to_json(self) -> str:
        doc = {"columns": list(RESULT_COLUMNS), "seeds": list(self.seeds), "rows": [[r[k] for k in RESULT_COLUMNS] for r in self.rows]}
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ResultTable:
        doc = json.loads(text)
        if tuple(doc["columns"]) != RESULT_COLUMNS:
            raise ValueError(f"unexpected result columns {doc['columns']}")
        rows = [dict(zip(RESULT_COLUMNS, vals)) for vals in doc["rows"]]
        for r in rows:
            for k in _FLOAT_COLUMNS:
                r[k] = float(r[k])
        return cls(rows, tuple(doc.get("seeds") or _seeds_of(rows)))

    def to_text(self, scale: float = 1.0) -> str:
        """Arms by TPs, ``mean ± std`` over seeds, two decimals."""
        tps = self.tps()
        header = ["arm", *(f"TP{t}" for t in tps)]
        lines = [header]
        for arm in self.arms():
            cells = [arm]
            for t in tps:
                try:
                    cells.append(self.aggregate(arm, t).format(scale))
                except KeyError:
                    cells.append("-")
            lines.append(cells)
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = []
        for i, row in enumerate(lines):
            out.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths))).rstrip())
            if i == 0:
                out.append("  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_row(r: dict) -> dict:
    out = {}
    for k in RESULT_COLUMNS:
        v = r[k]
        if k in _INT_COLUMNS:
            out[k] = int(v)
        elif k in _FLOAT_COLUMNS:
            out[k] = float(v)
        else:
            out[k] = v
    return out


def _seeds_of(rows: list[dict]) -> tuple[int, ...]:
    return tuple(sorted({r["seed"] for r in rows}))


REPORT_FORMATS = ("csv", "json", "text")


def emit_report(table: ResultTable, fmt: str, path: str | Path | None = None, scale: float = 1.0) -> str:
    """Render ``table`` as csv, json or a text table; also written to ``path`` when given."""
    if not len(table):
        raise ValueError("cannot report an empty table")
    if fmt == "csv":
        text = table.to_csv()
    elif fmt == "json":
        text = table.to_json()
    elif fmt in ("text", "text-table"):
        text = table.to_text(scale)
    else:
        raise ValueError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    if path is not None:
        Path(path).write_text(text)
    return text


def load_table(path: str | Path) -> ResultTable:
    """Read ``results.csv``/``.json`` from a file or a run directory."""
    path = Path(path)
    if path.is_dir():
        for name in ("results.csv", "results.json"):
            if (path / name).exists():
                return load_table(path / name)
        found = sorted(path.glob("*/results.csv"))
        if len(found) == 1:
            return load_table(found[0])
        raise FileNotFoundError(f"no unique results file under {path}")
    text = path.read_text()
    if path.suffix == ".json":
        return ResultTable.from_json(text)
    return ResultTable.from_csv(text)


# -- running -----------------------------------------------------------------------------


@dataclass
class _Stage:
    model: Model
    pool: Pool
    val: float
    best_iteration: int
    key: str


class _SeedRun:
    """Runs every arm of one seed; stages shared by several arms are trained once."""

    def __init__(self, cfg: ExperimentConfig, seed: int, seed_dir: Path | None):
        self.cfg = cfg
        self.seed = seed
        self.dir = seed_dir
        self.taxonomy = cfg.build_taxonomy()
        self.spec = dataclasses.replace(cfg.data, seed=seed)
        self.train_cfg = dataclasses.replace(cfg.train, seed=seed)
        self.aug = Augmentation.for_spec(self.spec)
        self.stages: dict[str, _Stage] = {}
        self._pool: Pool | None = None

    @property
    def base_pool(self) -> Pool:
        if self._pool is None:
            self._pool = generate_pool(self.spec, self.taxonomy, self.cfg.budget, self.cfg.test_size)
        return self._pool

    def stage(self, prefix: tuple[dict, ...]) -> _Stage:
        key = _digest(list(prefix))
        if key in self.stages:
            return self.stages[key]
        tp = len(prefix) - 1
        prev = self.stage(prefix[:-1]) if tp else None
        step = prefix[-1]
        pool = apply_annotation_strategy(prev.pool if prev else self.base_pool, step["annotation"], tp, self.cfg.budget[tp])
        datasets = pool.datasets(tp)
        spec = LossSpec.from_dict(step["loss"])
        size = self.taxonomy.level_sizes[tp]
        init_rng = np.random.default_rng([self.seed, tp, 0xA11])
        out = self._stage_dir(tp, key)
        teacher_log = None
        try:
            if spec.needs_teacher:
                teacher = self.stage(
                    (*prefix[:-1], {"annotation": step["annotation"], "init": InitStrategy.FINETUNE_PREV.value, "loss": spec.base_only().to_dict()})
                ).model
                model, _, trace, teacher_log = train_teacher_student(
                    datasets, spec, self.train_cfg, prev.model, self.taxonomy, aug=self.aug, teacher=teacher
                )
            else:
                model = init_for_tp(
                    prev.model if prev else None,
                    step["init"],
                    size,
                    init_rng,
                    input_dim=self.spec.dim,
                    hidden=self.train_cfg.hidden,
                )
                model, trace = train_tp(model, datasets, spec, self.train_cfg, self.taxonomy, aug=self.aug)
        except Exception as exc:
            raise RuntimeError(f"seed {self.seed}, TP {tp}, stage {step}: {exc}") from exc
        if out is not None:
            trace.to_csv(out / "log.csv")
            if teacher_log is not None:
                teacher_log.to_csv(out / "teacher_log.csv")
            (out / "stage.json").write_text(json.dumps({"prefix": list(prefix), "summary": datasets.summary()}, indent=1) + "\n")
            if self.cfg.save_checkpoints:
                model.save(out / "model")
        st = _Stage(model, pool, trace.best_val, trace.best_iteration, key)
        self.stages[key] = st
        return st

    def _stage_dir(self, tp: int, key: str) -> Path | None:
        if self.dir is None:
            return None
        d = self.dir / f"tp{tp}" / key
        d.mkdir(parents=True, exist_ok=True)
        return d

    def run(self) -> list[dict]:
        rows, index = [], {}
        for arm in self.cfg.arms:
            index[arm.name] = []
            for tp in range(self.cfg.num_tps):
                st = self.stage(tuple(arm.stage(t) for t in range(tp + 1)))
                index[arm.name].append(st.key)
                ds = st.pool.datasets(tp)
                summary = ds.summary()
                pool = st.pool
                x, y = pool.features[ds.test], pool.labels[ds.test, -1]
                for level in range(tp, -1, -1):
                    rows.append(
                        {
                            "arm": arm.name,
                            "tp": tp,
                            "seed": self.seed,
                            "level": level,
                            "test_mAcc": evaluate_at_level(st.model, x, y, self.taxonomy, level, self.train_cfg.eval_use_ema),
                            "val_mAcc": st.val,
                            "best_iteration": st.best_iteration,
                            "fine_labeled": summary["fine_labeled"],
                            "coarse_history": summary["coarse_history"],
                            "distinct_labeled": summary["distinct_labeled"],
                        }
                    )
        if self.dir is not None:
            (self.dir / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1) + "\n")
            (self.dir / "arms.json").write_text(json.dumps(index, indent=1) + "\n")
        return rows


def _run_seed(cfg: ExperimentConfig, seed: int, seed_dir: str | None) -> list[dict]:
    return _SeedRun(cfg, seed, Path(seed_dir) if seed_dir else None).run()


def run_dir(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    return Path(cfg.out if out is None else out) / cfg.config_hash()


def run_experiment(
    cfg: ExperimentConfig,
    *,
    out: str | Path | None = None,
    workers: int = 1,
    persist: bool = True,
) -> ResultTable:
    """Train and evaluate every arm for every seed.

    Artifacts go to ``<out>/<config-hash>/<seed>/`` and the table to
    ``<out>/<config-hash>/results.csv`` unless ``persist`` is off.
    """
    root = run_dir(cfg, out) if persist else None
    dirs = {s: (str(root / str(s)) if root is not None else None) for s in cfg.seeds}
    if root is not None:
        for d in dirs.values():
            Path(d).mkdir(parents=True, exist_ok=True)
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfg.seeds))) as ex:
            futures = {s: ex.submit(_run_seed, cfg, s, dirs[s]) for s in cfg.seeds}
            per_seed = {s: f.result() for s, f in futures.items()}
    else:
        per_seed = {s: _run_seed(cfg, s, dirs[s]) for s in cfg.seeds}

    order = {a.name: i for i, a in enumerate(cfg.arms)}
    rows = [r for s in cfg.seeds for r in per_seed[s]]
    rows.sort(key=lambda r: (order[r["arm"]], r["tp"], -r["level"], cfg.seeds.index(r["seed"])))
    table = ResultTable(rows, tuple(cfg.seeds))
    if root is not None:
        (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
        emit_report(table, "csv", root / "results.csv")
    return table


# -- hyperparameter sweep ----------------------------------------------------------------


@dataclass
class SweepResult:
    table: ResultTable
    selected: dict[str, dict]
    selection_log: list[dict]


def load_grid(path_or_dict: str | Path | dict) -> list[dict]:
    """Grid file: ``{"lr": [...], "weight_decay": [...]}``; returns cells in lr-major order."""
    grid = path_or_dict if isinstance(path_or_dict, dict) else json.loads(Path(path_or_dict).read_text())
    schema = {
        "type": "object",
        "properties": {
            "lr": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
            "weight_decay": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        },
        "required": ["lr", "weight_decay"],
        "additionalProperties": False,
    }
    try:
        jsonschema.validate(grid, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"grid: {exc.message}") from None
    return [{"lr": lr, "weight_decay": wd} for lr in grid["lr"] for wd in grid["weight_decay"]]


def select_cells(val_rows: Sequence[dict]) -> dict[str, dict]:
    """Pick, per arm, the grid cell with the best seed-mean validation mAcc at the final TP.

    Input rows carry only ``arm``, ``cell`` and ``val_mAcc``. Ties go to the
    earlier cell.
    """
    scores: dict[str, dict[int, list[float]]] = {}
    for r in val_rows:
        scores.setdefault(r["arm"], {}).setdefault(r["cell"], []).append(r["val_mAcc"])
    chosen = {}
    for arm, cells in scores.items():
        best_cell, best = None, -math.inf
        for cell in sorted(cells):
            m = float(np.mean(cells[cell]))
            if m > best:
                best_cell, best = cell, m
        chosen[arm] = {"cell": best_cell, "val_mAcc": best}
    return chosen


def sweep(
    cfg: ExperimentConfig,
    grid: Sequence[dict] | str | Path | dict,
    *,
    out: str | Path | None = None,
    workers: int = 1,
    persist: bool = True,
) -> SweepResult:
    """Train every lr x weight-decay cell and keep, per arm, the cell with the best validation mAcc.

    Only validation numbers reach the selection step; test mAcc is reported
    for the selected cells alone.
    """
    cells = list(grid) if isinstance(grid, (list, tuple)) else load_grid(grid)
    if not cells:
        raise ConfigError("empty grid")
    final = cfg.num_tps - 1
    tables = []
    for cell in cells:
        cell_cfg = cfg.replace(train=dataclasses.replace(cfg.train, base_lr=cell["lr"], weight_decay=cell["weight_decay"]))
        tables.append(run_experiment(cell_cfg, out=out, workers=workers, persist=persist))

    val_rows = [
        {"arm": r["arm"], "cell": i, "val_mAcc": r["val_mAcc"]}
        for i, t in enumerate(tables)
        for r in t.rows
        if r["tp"] == final and r["level"] == final
    ]
    chosen = select_cells(val_rows)
    rows = []
    for arm in cfg.arms:
        i = chosen[arm.name]["cell"]
        rows.extend(r for r in tables[i].rows if r["arm"] == arm.name)
    selected = {a: {**cells[c["cell"]], "val_mAcc": c["val_mAcc"]} for a, c in chosen.items()}
    selection_log = [
        {**cells[r["cell"]], "arm": r["arm"], "cell": r["cell"], "val_mAcc": r["val_mAcc"], "selected": chosen[r["arm"]]["cell"] == r["cell"]}
        for r in val_rows
    ]
    result = SweepResult(ResultTable(rows, tuple(cfg.seeds)), selected, selection_log)
    if persist:
        root = Path(cfg.out if out is None else out) / f"sweep-{cfg.config_hash()}-{_digest(cells)}"
        root.mkdir(parents=True, exist_ok=True)
        emit_report(result.table, "csv", root / "results.csv")
        with open(root / "selection.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["arm", "cell", "lr", "weight_decay", "val_mAcc", "selected"], lineterminator="\n")
            writer.writeheader()
            for r in selection_log:
                writer.writerow({k: _cell(r[k]) for k in writer.fieldnames})
    return result

