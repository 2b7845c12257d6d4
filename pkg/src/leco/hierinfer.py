"""Recover the old->new parent map from data labeled under both ontologies.

Each new class is assigned the old class it co-occurs with most (by total
weight, e.g. pixel or sample counts). Items whose old label disagrees with
the inferred parent of their new label are flagged so coarse-supervision
losses can skip them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from leco.ontology import Taxonomy


@dataclass(frozen=True)
class PairedLabeling:
    old: np.ndarray
    new: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        old = np.asarray(self.old, dtype=np.int64)
        new = np.asarray(self.new, dtype=np.int64)
        weight = np.ones(old.shape) if self.weight is None else np.asarray(self.weight, dtype=np.float64)
        if not (old.ndim == new.ndim == weight.ndim == 1) or not (len(old) == len(new) == len(weight)):
            raise ValueError("old, new and weight must be 1-d arrays of equal length")
        if np.any(weight < 0) or not np.all(np.isfinite(weight)):
            raise ValueError("weights must be finite and nonnegative")
        if np.any(old < 0) or np.any(new < 0):
            raise ValueError("label ids must be nonnegative")
        object.__setattr__(self, "old", old)
        object.__setattr__(self, "new", new)
        object.__setattr__(self, "weight", weight)

    def __len__(self) -> int:
        return len(self.old)

    @classmethod
    def from_text(cls, text: str) -> PairedLabeling:
        rows = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ValueError(f"line {lineno}: expected '<old_id> <new_id> [<weight>]'")
            rows.append((int(parts[0]), int(parts[1]), float(parts[2]) if len(parts) == 3 else 1.0))
        if not rows:
            return cls(np.empty(0), np.empty(0), np.empty(0))
        old, new, weight = zip(*rows)
        return cls(np.array(old), np.array(new), np.array(weight))

    def to_text(self) -> str:
        return "".join(f"{o} {n} {w!r}\n" for o, n, w in zip(self.old.tolist(), self.new.tolist(), self.weight.tolist()))

    @classmethod
    def load(cls, path: str | Path) -> PairedLabeling:
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def cooccurrence(paired: PairedLabeling, num_new: int, num_old: int) -> np.ndarray:
    """Total weight matrix of shape ``(num_new, num_old)``."""
    if len(paired) and (paired.new.max() >= num_new or paired.old.max() >= num_old):
        raise ValueError("label id exceeds the declared number of classes")
    counts = np.zeros((num_new, num_old))
    np.add.at(counts, (paired.new, paired.old), paired.weight)
    return counts


def infer_parent_map(paired: PairedLabeling, num_new: int, num_old: int) -> np.ndarray:
    """Majority parent for every new label; ties go to the smallest old id."""
    counts = cooccurrence(paired, num_new, num_old)
    empty = np.flatnonzero(counts.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(f"no co-occurrence evidence for new labels {empty.tolist()}")
    # np.argmax returns the first maximum, i.e. the smallest old id on ties.
    return np.argmax(counts, axis=1)


def mismatch_mask(paired: PairedLabeling, parent_map: np.ndarray) -> np.ndarray:
    """True where the old label is not the inferred parent of the new label."""
    parent_map = np.asarray(parent_map, dtype=np.int64)
    if len(paired) and paired.new.max() >= len(parent_map):
        raise ValueError("new label outside the parent map")
    return paired.old != parent_map[paired.new]


def masked_fraction(paired: PairedLabeling, parent_map: np.ndarray) -> float:
    """Weight share of items flagged by ``mismatch_mask``."""
    mask = mismatch_mask(paired, parent_map)
    total = paired.weight.sum()
    return float(paired.weight[mask].sum() / total) if total > 0 else 0.0


def taxonomy_from_parent_map(parent_map: np.ndarray, num_old: int) -> Taxonomy:
    """Two-level taxonomy (old, new) from an inferred map; old labels may end up childless."""
    return Taxonomy((num_old, len(parent_map)), (np.asarray(parent_map),), strict=False)


def noisy_pairs(
    taxonomy: Taxonomy,
    level: int,
    per_class: int,
    noise: float,
    rng: np.random.Generator,
) -> tuple[PairedLabeling, np.ndarray]:
    """Synthetic doubly-labeled corpus for ``level`` vs ``level - 1``.

    Each item keeps its true parent as old label with probability
    ``1 - noise``; otherwise the old label is drawn uniformly from the other
    coarse classes. Returns the pairs and a boolean array marking corrupted items.
    """
    num_new = taxonomy.level_sizes[level]
    num_old = taxonomy.level_sizes[level - 1]
    new = np.repeat(np.arange(num_new), per_class)
    old = taxonomy.parent_maps[level - 1][new].copy()
    corrupted = rng.random(len(new)) < noise if num_old > 1 else np.zeros(len(new), dtype=bool)
    shift = rng.integers(1, max(num_old, 2), size=int(corrupted.sum()))
    old[corrupted] = (old[corrupted] + shift) % num_old
    order = rng.permutation(len(new))
    paired = PairedLabeling(old[order], new[order], np.ones(len(new)))
    return paired, corrupted[order]
