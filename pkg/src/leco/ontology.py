"""Evolving class ontologies: per-level label sets, parent maps and edge matrices.

Labels are dense integer ids per level. Level 0 is the coarsest ontology and
every label at level ``t > 0`` has exactly one parent at level ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NORMALIZATION_TOL = 1e-9


class TaxonomyError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.int64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Taxonomy:
    """Immutable multi-level label hierarchy.

    ``parent_maps[t - 1][i]`` is the level ``t - 1`` parent of label ``i`` at
    level ``t``. With ``strict=True`` (the default) level sizes must grow
    strictly and every non-leaf label needs at least one child; ``strict=False``
    admits degenerate hierarchies (identity refinement, inferred maps that
    leave some old classes without children).
    """

    level_sizes: tuple[int, ...]
    parent_maps: tuple[np.ndarray, ...]
    names: tuple[tuple[str, ...], ...] | None = None
    strict: bool = True
    _children: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.level_sizes)
        object.__setattr__(self, "level_sizes", sizes)
        if not sizes:
            raise TaxonomyError("taxonomy needs at least one level")
        if any(s < 1 for s in sizes):
            raise TaxonomyError(f"every level needs at least one label, got sizes {sizes}")
        if len(self.parent_maps) != len(sizes) - 1:
            raise TaxonomyError(
                f"expected {len(sizes) - 1} parent maps for {len(sizes)} levels, got {len(self.parent_maps)}"
            )
        maps = tuple(_frozen(m) for m in self.parent_maps)
        object.__setattr__(self, "parent_maps", maps)
        for t, pm in enumerate(maps, start=1):
            if pm.shape != (sizes[t],):
                raise TaxonomyError(f"parent map for level {t} has shape {pm.shape}, expected ({sizes[t]},)")
            if pm.size and (pm.min() < 0 or pm.max() >= sizes[t - 1]):
                raise TaxonomyError(f"parent map for level {t} references labels outside level {t - 1}")
            if self.strict:
                if sizes[t] <= sizes[t - 1]:
                    raise TaxonomyError(f"level sizes must strictly increase, got {sizes}")
                childless = np.setdiff1d(np.arange(sizes[t - 1]), pm)
                if childless.size:
                    raise TaxonomyError(f"level {t - 1} labels without children: {childless.tolist()}")
        if self.names is not None:
            names = tuple(tuple(str(n) for n in lvl) for lvl in self.names)
            if tuple(len(lvl) for lvl in names) != sizes:
                raise TaxonomyError("label names do not match level sizes")
            object.__setattr__(self, "names", names)
        children = []
        for t, pm in enumerate(maps, start=1):
            children.append(tuple(np.flatnonzero(pm == j) for j in range(sizes[t - 1])))
        object.__setattr__(self, "_children", tuple(children))

    @property
    def num_levels(self) -> int:
        return len(self.level_sizes)

    def parent(self, label: int, level: int) -> int:
        self._check_label(label, level)
        if level == 0:
            raise TaxonomyError("level-0 labels have no parent")
        return int(self.parent_maps[level - 1][label])

    def children(self, label: int, level: int) -> np.ndarray:
        """Labels at ``level + 1`` whose parent is ``label``."""
        self._check_label(label, level)
        if level >= self.num_levels - 1:
            return np.empty(0, dtype=np.int64)
        return self._children[level][label]

    def label_name(self, label: int, level: int) -> str:
        self._check_label(label, level)
        if self.names is None:
            return f"L{level}_{label}"
        return self.names[level][label]

    def _check_level(self, level: int) -> None:
        if not 0 <= level < self.num_levels:
            raise TaxonomyError(f"level {level} out of range [0, {self.num_levels})")

    def _check_label(self, label: int, level: int) -> None:
        self._check_level(level)
        if not 0 <= label < self.level_sizes[level]:
            raise TaxonomyError(f"label {label} invalid at level {level} (size {self.level_sizes[level]})")

    # -- constructors ---------------------------------------------------------------

    @classmethod
    def balanced(cls, branching: Sequence[int]) -> Taxonomy:
        """Complete tree: ``branching[0]`` roots, each node at level t splits into ``branching[t+1]``.

        ``Taxonomy.balanced([20, 5])`` is the CIFAR-style 20 -> 100 hierarchy.
        """
        if not branching or any(b < 1 for b in branching):
            raise TaxonomyError(f"invalid branching {branching}")
        sizes = [int(branching[0])]
        maps = []
        for b in branching[1:]:
            maps.append(np.repeat(np.arange(sizes[-1]), b))
            sizes.append(sizes[-1] * int(b))
        return cls(tuple(sizes), tuple(maps))

    @classmethod
    def random(cls, level_sizes: Sequence[int], rng: np.random.Generator) -> Taxonomy:
        """Random tree with the given level sizes; every coarse label gets at least one child."""
        sizes = [int(s) for s in level_sizes]
        maps = []
        for coarse, fine in zip(sizes[:-1], sizes[1:]):
            if fine < coarse:
                raise TaxonomyError(f"cannot refine {coarse} labels into {fine}")
            pm = np.concatenate([np.arange(coarse), rng.integers(0, coarse, size=fine - coarse)])
            maps.append(rng.permutation(pm))
        return cls(tuple(sizes), tuple(maps))

    @classmethod
    def identity(cls, size: int, num_levels: int = 2) -> Taxonomy:
        """Degenerate hierarchy where every level is the same label set."""
        return cls((size,) * num_levels, tuple(np.arange(size) for _ in range(num_levels - 1)), strict=False)

    # -- serialization ----------------------------------------------------------------

    def to_text(self) -> str:
        lines = ["# level label_id label_name parent_id"]
        for level, size in enumerate(self.level_sizes):
            for label in range(size):
                parent = -1 if level == 0 else int(self.parent_maps[level - 1][label])
                name = self.label_name(label, level).replace(" ", "_")
                lines.append(f"{level} {label} {name} {parent}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, strict: bool = True) -> Taxonomy:
        rows: dict[int, dict[int, tuple[str, int]]] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise TaxonomyError(f"line {lineno}: expected '<level> <label_id> <label_name> <parent_id>'")
            level, label, name, parent = int(parts[0]), int(parts[1]), parts[2], int(parts[3])
            if label in rows.setdefault(level, {}):
                raise TaxonomyError(f"line {lineno}: duplicate label {label} at level {level}")
            rows[level][label] = (name, parent)
        if sorted(rows) != list(range(len(rows))):
            raise TaxonomyError(f"levels must be contiguous from 0, got {sorted(rows)}")
        sizes, maps, names = [], [], []
        for level in range(len(rows)):
            entries = rows[level]
            if sorted(entries) != list(range(len(entries))):
                raise TaxonomyError(f"label ids at level {level} must be dense 0..n-1")
            sizes.append(len(entries))
            names.append(tuple(entries[i][0] for i in range(len(entries))))
            parents = [entries[i][1] for i in range(len(entries))]
            if level == 0:
                if any(p != -1 for p in parents):
                    raise TaxonomyError("level-0 labels must have parent_id -1")
            else:
                maps.append(np.array(parents))
        return cls(tuple(sizes), tuple(maps), tuple(names), strict=strict)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path, strict: bool = True) -> Taxonomy:
        return cls.from_text(Path(path).read_text(), strict=strict)


def _check_pair(taxonomy: Taxonomy, t: int, t_prime: int) -> None:
    taxonomy._check_level(t)
    taxonomy._check_level(t_prime)
    if t_prime >= t:
        raise TaxonomyError(f"coarse level must be below the fine level (got t={t}, t'={t_prime})")


def build_edge_matrix(taxonomy: Taxonomy, t: int, t_prime: int) -> np.ndarray:
    """0/1 matrix of shape ``(|Y^t|, |Y^t'|)`` with ``E[i, j] = 1`` iff j is the level-t' ancestor of i."""
    _check_pair(taxonomy, t, t_prime)
    ancestors = coarsen_labels(taxonomy, np.arange(taxonomy.level_sizes[t]), t, t_prime)
    edges = np.zeros((taxonomy.level_sizes[t], taxonomy.level_sizes[t_prime]))
    edges[np.arange(edges.shape[0]), ancestors] = 1.0
    return edges


def coarsen_labels(taxonomy: Taxonomy, labels: np.ndarray, level: int, t_prime: int) -> np.ndarray:
    """Vectorized ancestor lookup from ``level`` up to ``t_prime`` (``t_prime <= level`` allowed)."""
    taxonomy._check_level(level)
    taxonomy._check_level(t_prime)
    if t_prime > level:
        raise TaxonomyError(f"cannot coarsen level {level} labels to finer level {t_prime}")
    out = np.asarray(labels, dtype=np.int64)
    if out.size and (out.min() < 0 or out.max() >= taxonomy.level_sizes[level]):
        raise TaxonomyError(f"labels outside level {level}")
    for lvl in range(level, t_prime, -1):
        out = taxonomy.parent_maps[lvl - 1][out]
    return out


def coarsen_label(taxonomy: Taxonomy, label: int, level: int, t_prime: int) -> int:
    """The unique level-``t_prime`` ancestor of ``label`` (a level-``level`` id)."""
    _check_pair(taxonomy, level, t_prime)
    taxonomy._check_label(label, level)
    return int(coarsen_labels(taxonomy, np.array([label]), level, t_prime)[0])


def marginalize(q: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Sum fine-class probabilities into their coarse ancestors (``q @ E``).

    ``q`` may be a single vector or a batch of row vectors.
    """
    q = np.asarray(q, dtype=np.float64)
    edges = np.asarray(edges)
    if q.shape[-1] != edges.shape[0]:
        raise ValueError(f"probability width {q.shape[-1]} does not match edge matrix rows {edges.shape[0]}")
    sums = q.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOL):
        raise ValueError(f"probabilities not normalized (max deviation {np.max(np.abs(sums - 1.0)):.3g})")
    return q @ edges
