"""Hierarchical Gaussian-mixture data, annotation strategies and feature augmentation.

A pool is generated once per seed: one block of unallocated samples per TP
plus a balanced test split. Annotation strategies then decide which samples
the learner may see, and at which ontology level.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from leco.ontology import Taxonomy, coarsen_labels

UNALLOCATED, TRAIN, VAL, TEST = 0, 1, 2, 3
SPLIT_NAMES = {UNALLOCATED: "unallocated", TRAIN: "train", VAL: "val", TEST: "test"}
VAL_FRACTION = 0.2


class Annotation(str, enum.Enum):
    LABEL_NEW = "LabelNew"
    RELABEL_OLD = "RelabelOld"
    ALL_FINE = "AllFine"


@dataclass(frozen=True)
class HierarchicalGaussianSpec:
    dim: int = 32
    sigma_coarse: float = 4.0
    sigma_fine: float = 1.0
    sigma_noise: float = 0.6
    tail_exponent: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        for name in ("sigma_coarse", "sigma_fine", "sigma_noise", "tail_exponent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> HierarchicalGaussianSpec:
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown data spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    labels_by_level: tuple[int, ...]
    visible_level: int


@dataclass(frozen=True)
class Pool:
    """All samples of one seed plus their annotation state.

    Pools are treated as values: annotation returns a new pool and the
    feature/label arrays are shared between versions.
    """

    spec: HierarchicalGaussianSpec
    taxonomy: Taxonomy
    features: np.ndarray
    labels: np.ndarray  # (n, num_levels), full lineage known to the generator
    block: np.ndarray  # draw block per sample, -1 for test
    split: np.ndarray
    visible_level: np.ndarray  # -1 while unallocated
    draw: np.ndarray  # TP at which the sample was first annotated, -1 if never
    excluded: np.ndarray  # samples masked out of coarse supervision

    def __len__(self) -> int:
        return len(self.features)

    @property
    def finest_level(self) -> int:
        return self.taxonomy.num_levels - 1

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.features[i], tuple(int(v) for v in self.labels[i]), int(self.visible_level[i]))

    def replace(self, **changes) -> Pool:
        return dataclasses.replace(self, **changes)

    def labeled(self) -> np.ndarray:
        return np.flatnonzero((self.split == TRAIN) | (self.split == VAL))

    def datasets(self, tp: int) -> TPDatasets:
        train = self.split == TRAIN
        vis = self.visible_level
        return TPDatasets(
            pool=self,
            tp=tp,
            train_new=np.flatnonzero(train & (vis == tp)),
            history=np.flatnonzero(train & (vis >= 0) & (vis < tp)),
            val=np.flatnonzero((self.split == VAL) & (vis == tp)),
            test=np.flatnonzero(self.split == TEST),
        )

    def with_mismatch(self, mask: np.ndarray) -> Pool:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.excluded.shape:
            raise ValueError("mismatch mask must cover every sample")
        return self.replace(excluded=mask.copy())


@dataclass(frozen=True)
class TPDatasets:
    """Index views into a pool for one TP: S^t, S^{1:t-1}, validation and test."""

    pool: Pool
    tp: int
    train_new: np.ndarray
    history: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def labels_at(self, idx: np.ndarray, level: int) -> np.ndarray:
        return self.pool.labels[idx, level]

    def visible_labels(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Finest visible label and its level, without revealing anything finer."""
        levels = self.pool.visible_level[idx]
        return self.pool.labels[idx, levels], levels

    def summary(self) -> dict:
        return {
            "tp": self.tp,
            "fine_labeled": int(len(self.train_new) + len(self.val)),
            "fine_train": int(len(self.train_new)),
            "coarse_history": int(len(self.history)),
            "val": int(len(self.val)),
            "test": int(len(self.test)),
            "distinct_labeled": int(len(self.pool.labeled())),
        }


def class_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` samples proportional to ``weights``."""
    share = weights / weights.sum() * total
    counts = np.floor(share).astype(np.int64)
    remainder = int(total - counts.sum())
    if remainder:
        order = np.lexsort((np.arange(len(share)), -(share - counts)))
        counts[order[:remainder]] += 1
    return counts


def generate_pool(
    spec: HierarchicalGaussianSpec,
    taxonomy: Taxonomy,
    sizes: Sequence[int],
    test_size: int,
) -> Pool:
    """Draw every sample of a run: one block per entry of ``sizes`` plus a balanced test split."""
    num_fine = taxonomy.level_sizes[-1]
    if num_fine < 1:
        raise ValueError("taxonomy has no classes")
    if not sizes or any(s <= 0 for s in sizes) or test_size < 0:
        raise ValueError("block sizes must be positive")
    if spec.tail_exponent == 0 and min(sizes) < num_fine:
        raise ValueError(f"balanced sampling needs at least {num_fine} samples per block, got {min(sizes)}")

    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.sigma_coarse, size=(taxonomy.level_sizes[0], spec.dim))
    for pm in taxonomy.parent_maps:
        centers = centers[pm] + rng.normal(0.0, spec.sigma_fine, size=(len(pm), spec.dim))

    rank = rng.permutation(num_fine)
    weights = (rank + 1.0) ** (-spec.tail_exponent)

    fine, block = [], []
    for b, size in enumerate(sizes):
        labels = np.repeat(np.arange(num_fine), class_counts(weights, int(size)))
        fine.append(rng.permutation(labels))
        block.append(np.full(int(size), b))
    test_labels = np.repeat(np.arange(num_fine), class_counts(np.ones(num_fine), int(test_size)))
    fine.append(rng.permutation(test_labels))
    block.append(np.full(int(test_size), -1))
    fine = np.concatenate(fine)
    block = np.concatenate(block)

    features = centers[fine] + rng.normal(0.0, spec.sigma_noise, size=(len(fine), spec.dim))
    finest = taxonomy.num_levels - 1
    labels = np.stack([coarsen_labels(taxonomy, fine, finest, lvl) for lvl in range(taxonomy.num_levels)], axis=1)

    n = len(fine)
    split = np.where(block < 0, TEST, UNALLOCATED).astype(np.int8)
    return Pool(
        spec=spec,
        taxonomy=taxonomy,
        features=features,
        labels=labels,
        block=block,
        split=split,
        visible_level=np.full(n, -1, dtype=np.int64),
        draw=np.full(n, -1, dtype=np.int64),
        excluded=np.zeros(n, dtype=bool),
    )


def _split_rng(pool: Pool, tp: int) -> np.random.Generator:
    return np.random.default_rng([pool.spec.seed, 0x5EED, tp])


def _draw_new(pool: Pool, tp: int, budget: int, split, visible, draw) -> None:
    free = np.flatnonzero(split == UNALLOCATED)
    if len(free) < budget:
        raise ValueError(f"pool has {len(free)} unallocated samples, {budget} requested at TP {tp}")
    chosen = free[:budget]
    n_val = int(round(VAL_FRACTION * budget))
    val = _split_rng(pool, tp).permutation(budget)[:n_val]
    split[chosen] = TRAIN
    split[chosen[val]] = VAL
    visible[chosen] = tp
    draw[chosen] = tp


def apply_annotation_strategy(pool: Pool, strategy: Annotation | str, tp: int, budget: int) -> Pool:
    """Spend the TP's labeling budget and return the updated pool.

    LabelNew draws ``budget`` fresh samples labeled at level ``tp``;
    RelabelOld upgrades up to ``budget`` samples currently labeled at
    ``tp - 1``; AllFine draws fresh samples and relabels everything
    accumulated so far (the oracle).
    """
    strategy = Annotation(strategy)
    if not 0 <= tp < pool.taxonomy.num_levels:
        raise ValueError(f"TP {tp} has no ontology level")
    if budget <= 0:
        raise ValueError("budget must be positive")
    split = pool.split.copy()
    visible = pool.visible_level.copy()
    draw = pool.draw.copy()

    if strategy is Annotation.LABEL_NEW:
        _draw_new(pool, tp, budget, split, visible, draw)
    elif strategy is Annotation.ALL_FINE:
        _draw_new(pool, tp, budget, split, visible, draw)
        allocated = (split == TRAIN) | (split == VAL)
        visible[allocated] = tp
    else:
        if tp == 0:
            raise ValueError("RelabelOld needs data from a previous TP")
        candidates = np.flatnonzero(((split == TRAIN) | (split == VAL)) & (visible == tp - 1))
        if not len(candidates):
            raise ValueError(f"no samples labeled at level {tp - 1} to relabel")
        if len(candidates) > budget:
            candidates = np.sort(_split_rng(pool, tp).choice(candidates, size=budget, replace=False))
        visible[candidates] = tp
    return pool.replace(split=split, visible_level=visible, draw=draw)


@dataclass(frozen=True)
class Augmentation:
    """Feature-vector stand-in for image augmentation.

    weak: additive Gaussian noise. strong: weak noise, then inverted dropout.
    """

    noise_std: float
    drop_prob: float = 0.2

    @classmethod
    def for_spec(cls, spec: HierarchicalGaussianSpec, drop_prob: float = 0.2) -> Augmentation:
        return cls(noise_std=0.05 * spec.sigma_noise, drop_prob=drop_prob)

    def __call__(self, x: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
        return augment(x, mode, rng, self.noise_std, self.drop_prob)


def augment(
    x: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    noise_std: float,
    drop_prob: float = 0.2,
) -> np.ndarray:
    if mode == "none":
        return np.array(x, dtype=np.float64)
    if mode not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    out = x + rng.normal(0.0, noise_std, size=x.shape) if noise_std > 0 else x.copy()
    if mode == "strong" and drop_prob > 0:
        keep = rng.random(x.shape) >= drop_prob
        out = np.where(keep, out / (1.0 - drop_prob), 0.0)
    return out


# -- export / import -------------------------------------------------------------------


def save_pool(pool: Pool, out_dir: str | Path) -> Path:
    """Write ``data.csv`` (one row per sample), ``taxonomy.txt`` and ``spec.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool.taxonomy.save(out / "taxonomy.txt")
    (out / "spec.json").write_text(json.dumps(pool.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    levels = pool.taxonomy.num_levels
    header = (
        [f"feature_{i}" for i in range(pool.spec.dim)]
        + [f"label_level_{lvl}" for lvl in range(levels)]
        + ["visible_level", "split", "draw", "block", "excluded"]
    )
    with open(out / "data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(pool)):
            writer.writerow(
                [repr(v) for v in pool.features[i].tolist()]
                + pool.labels[i].tolist()
                + [
                    int(pool.visible_level[i]),
                    SPLIT_NAMES[int(pool.split[i])],
                    int(pool.draw[i]),
                    int(pool.block[i]),
                    int(pool.excluded[i]),
                ]
            )
    return out


def load_pool(in_dir: str | Path) -> Pool:
    src = Path(in_dir)
    spec = HierarchicalGaussianSpec.from_dict(json.loads((src / "spec.json").read_text()))
    taxonomy = Taxonomy.load(src / "taxonomy.txt", strict=False)
    split_codes = {v: k for k, v in SPLIT_NAMES.items()}
    feats, labels, vis, split, draw, block, excl = [], [], [], [], [], [], []
    with open(src / "data.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("feature_"))
        levels = sum(1 for h in header if h.startswith("label_level_"))
        if d != spec.dim or levels != taxonomy.num_levels:
            raise ValueError("data.csv columns do not match spec.json / taxonomy.txt")
        for row in reader:
            feats.append([float(v) for v in row[:d]])
            labels.append([int(v) for v in row[d : d + levels]])
            rest = row[d + levels :]
            vis.append(int(rest[0]))
            split.append(split_codes[rest[1]])
            draw.append(int(rest[2]))
            block.append(int(rest[3]))
            excl.append(bool(int(rest[4])))
    return Pool(
        spec=spec,
        taxonomy=taxonomy,
        features=np.array(feats, dtype=np.float64).reshape(-1, d),
        labels=np.array(labels, dtype=np.int64).reshape(-1, levels),
        block=np.array(block, dtype=np.int64),
        split=np.array(split, dtype=np.int8),
        visible_level=np.array(vis, dtype=np.int64),
        draw=np.array(draw, dtype=np.int64),
        excluded=np.array(excl, dtype=bool),
    )
