"""Training objectives over new-ontology batches (B_K) and old-ontology batches (B_M).

Every term is a batch mean: terms on B_K are divided by ``|B_K|`` and terms
on B_M by ``|B_M|`` (rejected or masked samples still count in the
denominator). Enabled terms are summed with unit weights. Gradients are
computed analytically at the logits and back-propagated once through the
shared extractor.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from leco.model import Model, softmax
from leco.ontology import NORMALIZATION_TOL, Taxonomy, build_edge_matrix, coarsen_labels
from leco.synthdata import Augmentation

PROB_FLOOR = 1e-12


class SSL(str, enum.Enum):
    NONE = "none"
    ST_HARD = "ST-Hard"
    ST_SOFT = "ST-Soft"
    PL = "PL"
    FIXMATCH = "FixMatch"


class Refinement(str, enum.Enum):
    NONE = "none"
    FILTER = "Filter"
    CONDITION = "Condition"


class ConditioningError(ValueError):
    """The true coarse class carries no probability mass, so renormalization is undefined."""


@dataclass(frozen=True)
class LossSpec:
    use_base: bool = True
    ssl: SSL = SSL.NONE
    refinement: Refinement = Refinement.NONE
    use_joint: bool = False
    use_lpl: bool = False
    apply_coarse_on_new: bool = True
    pl_threshold: float = 0.95
    fixmatch_soft_target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ssl", SSL(self.ssl))
        object.__setattr__(self, "refinement", Refinement(self.refinement))
        if self.refinement is not Refinement.NONE and self.ssl is SSL.NONE:
            raise ValueError("pseudo-label refinement needs an SSL loss")
        if not 0.0 <= self.pl_threshold < 1.0:
            raise ValueError("pl_threshold must be in [0, 1)")

    @property
    def uses_old_data(self) -> bool:
        return self.ssl is not SSL.NONE or self.use_joint or self.use_lpl

    @property
    def needs_teacher(self) -> bool:
        return self.ssl in (SSL.ST_HARD, SSL.ST_SOFT)

    @property
    def label(self) -> str:
        parts = ["L"] if self.use_base else []
        if self.use_joint:
            parts.append("Joint")
        if self.use_lpl:
            parts.append("LPL")
        if self.ssl is not SSL.NONE:
            ssl = self.ssl.value
            if self.refinement is not Refinement.NONE:
                ssl += "/" + ("Cond" if self.refinement is Refinement.CONDITION else "Filter")
            parts.append(ssl)
        return "+".join(parts) or "none"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ssl"] = self.ssl.value
        d["refinement"] = self.refinement.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LossSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss spec fields: {sorted(unknown)}")
        return cls(**d)

    def base_only(self) -> LossSpec:
        return LossSpec(pl_threshold=self.pl_threshold)


@dataclass
class Batch:
    """Inputs with their finest visible label ``y`` at ``level``; ``mask`` marks excluded samples."""

    x: np.ndarray
    y: np.ndarray
    level: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.level = np.broadcast_to(np.asarray(self.level, dtype=np.int64), self.y.shape).copy()
        self.mask = np.zeros(len(self.y), dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if not (len(self.x) == len(self.y) == len(self.mask)):
            raise ValueError("batch arrays must have equal length")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def empty(cls, dim: int) -> Batch:
        return cls(np.empty((0, dim)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


@dataclass
class PseudoLabel:
    """Pseudo-labels for a batch: ``target`` rows over Y^t, ``accepted`` per row."""

    target: np.ndarray
    accepted: np.ndarray
    source_mode: str

    def __len__(self) -> int:
        return len(self.accepted)


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray]
    terms: dict[str, float] = field(default_factory=dict)
    pseudo: PseudoLabel | None = None
    pl_considered: int = 0
    pl_accepted: int = 0
    condition_skipped: int = 0

    def __iter__(self):
        yield self.value
        yield self.grads


# -- logit-level losses ----------------------------------------------------------------


def _check_normalized(p: np.ndarray, what: str) -> None:
    if p.size and np.any(np.abs(p.sum(axis=-1) - 1.0) > NORMALIZATION_TOL):
        raise ValueError(f"{what} is not normalized")


def cross_entropy(q: np.ndarray, target: np.ndarray) -> tuple[np.ndarray | float, np.ndarray]:
    """H(target, q) and its gradient ``q - target`` w.r.t. the logits behind ``q``.

    Works on one vector (scalar loss) or row batches (one loss per row).
    """
    q = np.asarray(q, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if q.shape != target.shape:
        raise ValueError(f"shape mismatch: q {q.shape} vs target {target.shape}")
    _check_normalized(q, "q")
    _check_normalized(target, "target")
    loss = -(target * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=-1)
    grad = q - target
    return (float(loss) if q.ndim == 1 else loss), grad


def marginal_cross_entropy(
    q: np.ndarray, edges: np.ndarray, coarse_target: np.ndarray
) -> tuple[np.ndarray | float, np.ndarray]:
    """H(coarse_target, q @ E) and its gradient w.r.t. the fine logits.

    With Q = q @ E and r = E @ (target / Q), d/dlogit_j = q_j (sum(target) - r_j).
    """
    q = np.asarray(q, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    coarse_target = np.asarray(coarse_target, dtype=np.float64)
    if q.shape[-1] != edges.shape[0] or coarse_target.shape[-1] != edges.shape[1]:
        raise ValueError("dimension mismatch between q, edge matrix and coarse target")
    _check_normalized(q, "q")
    big_q = q @ edges
    clamped = np.maximum(big_q, PROB_FLOOR)
    loss = -(coarse_target * np.log(clamped)).sum(axis=-1)
    r = (coarse_target / clamped) @ edges.T
    grad = q * (coarse_target.sum(axis=-1, keepdims=True) - r)
    return (float(loss) if q.ndim == 1 else loss), grad


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _hard_ce_rows(q: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(len(labels))
    loss = -np.log(np.maximum(q[rows, labels], PROB_FLOOR))
    grad = q.copy()
    grad[rows, labels] -= 1.0
    return loss, grad


# -- pseudo-labels ---------------------------------------------------------------------


def pseudo_from_probs(q: np.ndarray, mode: str, threshold: float | None = None) -> PseudoLabel:
    """Turn probability rows into pseudo-labels.

    ``hard`` targets are one-hot at the argmax (ties to the smallest id),
    ``soft`` targets are the probabilities themselves. With a threshold a row
    is accepted only if its max probability is strictly above it.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if mode == "hard":
        target = _one_hot(np.argmax(q, axis=1), q.shape[1])
    elif mode == "soft":
        target = q.copy()
    else:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    if threshold is None:
        accepted = np.ones(len(q), dtype=bool)
    else:
        accepted = q.max(axis=1) > threshold
    return PseudoLabel(target, accepted, mode)


def pseudo_label_st(teacher: Model, x: np.ndarray, mode: str, level: int | None = None) -> PseudoLabel:
    """Teacher pseudo-labels (ST-Hard: ``mode='hard'``, ST-Soft: ``mode='soft'``) for already-augmented inputs."""
    level = teacher.level if level is None else level
    _, q, _ = teacher.forward(np.atleast_2d(x), level, use_ema=True)
    return pseudo_from_probs(q, mode)


def pseudo_label_pl(model: Model, x: np.ndarray, threshold: float = 0.95, level: int | None = None) -> PseudoLabel:
    level = model.level if level is None else level
    _, q, _ = model.forward(np.atleast_2d(x), level)
    return pseudo_from_probs(q, "hard", threshold)


def pseudo_label_fixmatch(
    model: Model,
    x: np.ndarray,
    aug: Augmentation,
    rng: np.random.Generator,
    threshold: float = 0.95,
    soft_target: bool = False,
    level: int | None = None,
) -> tuple[PseudoLabel, np.ndarray]:
    """Pseudo-label from a weak view; returns it with the strong view the student is trained on."""
    level = model.level if level is None else level
    x = np.atleast_2d(x)
    weak = aug(x, "weak", rng)
    strong = aug(x, "strong", rng)
    _, q_w, _ = model.forward(weak, level)
    return pseudo_from_probs(q_w, "soft" if soft_target else "hard", threshold), strong


def refine_filter(p: PseudoLabel, coarse_label, edges: np.ndarray) -> PseudoLabel:
    """Reject pseudo-labels whose argmax is not a descendant of the true coarse label."""
    coarse = np.atleast_1d(np.asarray(coarse_label, dtype=np.int64))
    return _filter(p, np.asarray(edges)[:, coarse].T > 0)


def _filter(p: PseudoLabel, allowed: np.ndarray) -> PseudoLabel:
    top = np.argmax(p.target, axis=1)
    consistent = allowed[np.arange(len(top)), top]
    return PseudoLabel(p.target, p.accepted & consistent, p.source_mode)


def condition_rows(q: np.ndarray, allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero out non-descendant scores and renormalize; ``valid`` is False where no mass remains."""
    masked = np.where(allowed, q, 0.0)
    mass = masked.sum(axis=1, keepdims=True)
    valid = mass[:, 0] > 0
    out = np.divide(masked, mass, out=np.zeros_like(masked), where=mass > 0)
    return out, valid


def refine_condition(q: np.ndarray, coarse_label, edges: np.ndarray) -> np.ndarray:
    """Condition probabilities on the true coarse label(s); raises when that is undefined."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    _check_normalized(q2, "q")
    coarse = np.atleast_1d(np.asarray(coarse_label, dtype=np.int64))
    out, valid = condition_rows(q2, np.asarray(edges)[:, coarse].T > 0)
    if not valid.all():
        raise ConditioningError(f"{int((~valid).sum())} rows have zero mass on the true coarse class")
    return out[0] if single else out


def descendant_mask(taxonomy: Taxonomy, level: int, coarse: np.ndarray, coarse_level: np.ndarray) -> np.ndarray:
    """``allowed[i, c]`` is True iff level-``level`` class c descends from ``coarse[i]`` (at ``coarse_level[i]``)."""
    allowed = np.zeros((len(coarse), taxonomy.level_sizes[level]), dtype=bool)
    fine_ids = np.arange(taxonomy.level_sizes[level])
    for lvl in np.unique(coarse_level):
        rows = np.flatnonzero(coarse_level == lvl)
        ancestors = coarsen_labels(taxonomy, fine_ids, level, int(lvl))
        allowed[rows] = ancestors[None, :] == coarse[rows, None]
    return allowed


def make_pseudo_labels(
    spec: LossSpec,
    q_source: np.ndarray,
    allowed: np.ndarray | None,
) -> tuple[PseudoLabel, int]:
    """Apply refinement and gating to raw pseudo-label probabilities.

    Conditioning runs on the probabilities before hardening and gating;
    Filtering runs on the argmax afterwards. Returns the labels and the
    number of rows skipped because conditioning was undefined.
    """
    skipped = 0
    valid = np.ones(len(q_source), dtype=bool)
    if spec.refinement is Refinement.CONDITION:
        q_source, valid = condition_rows(q_source, allowed)
        skipped = int((~valid).sum())
    if spec.ssl is SSL.ST_SOFT:
        p = pseudo_from_probs(q_source, "soft")
    elif spec.ssl is SSL.ST_HARD:
        p = pseudo_from_probs(q_source, "hard")
    elif spec.ssl is SSL.FIXMATCH and spec.fixmatch_soft_target:
        p = pseudo_from_probs(q_source, "soft", spec.pl_threshold)
    else:
        p = pseudo_from_probs(q_source, "hard", spec.pl_threshold)
    p.accepted &= valid
    if spec.refinement is Refinement.FILTER:
        p = _filter(p, allowed)
    return p, skipped


# -- batch objective ---------------------------------------------------------------------


def _coarse_rows(batch: Batch, t_prime: int, taxonomy: Taxonomy, offset: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows (offset into the stacked batch) with a derivable level-t' label, and those labels."""
    keep = (~batch.mask) & (batch.level >= t_prime)
    rows = np.flatnonzero(keep)
    labels = np.empty(len(rows), dtype=np.int64)
    for lvl in np.unique(batch.level[rows]):
        sel = batch.level[rows] == lvl
        labels[sel] = coarsen_labels(taxonomy, batch.y[rows[sel]], int(lvl), t_prime)
    return rows + offset, labels


def total_loss(
    spec: LossSpec,
    model: Model,
    teacher: Model | None,
    batch_new: Batch,
    batch_old: Batch,
    taxonomy: Taxonomy,
    rng: np.random.Generator | None = None,
    *,
    aug: Augmentation | None = None,
    view: str = "strong",
    pseudo: PseudoLabel | None = None,
    edges: dict[tuple[int, int], np.ndarray] | None = None,
) -> LossResult:
    """Sum of the enabled terms and gradients for every trainable parameter.

    ``aug`` (with ``rng``) turns inputs into training views: ``view`` for
    B_K and B_M, plus a weak view of B_M for FixMatch. Without ``aug`` the
    raw inputs are used for every view. ``pseudo`` overrides pseudo-label
    generation, which is how gradients are checked with targets held fixed.
    """
    if spec.needs_teacher and teacher is None:
        raise ValueError(f"{spec.ssl.value} needs a teacher model")
    if teacher is not None and not spec.needs_teacher:
        raise ValueError(f"a teacher was given but {spec.ssl.value} does not use one")
    t = model.level
    if not (batch_new.level == t).all():
        raise ValueError(f"B_K labels must be at the model's level {t}")
    if len(batch_old) and batch_old.level.max() >= t:
        raise ValueError("B_M labels must be coarser than the model's level")
    n_k, n_m = len(batch_new), len(batch_old)
    edges = {} if edges is None else edges

    def view_of(x, mode):
        if aug is None:
            return x
        return aug(x, mode, rng)

    x_k = view_of(batch_new.x, view)
    x_m = view_of(batch_old.x, view)
    x_w = view_of(batch_old.x, "weak") if spec.ssl is SSL.FIXMATCH else None

    terms: dict[str, float] = {}
    if n_k + n_m == 0:
        grads = {n: np.zeros_like(model.params[n]) for n in model.trainable_names()}
        for name, on in (("base", spec.use_base), ("ssl", spec.ssl is not SSL.NONE), ("joint", spec.use_joint), ("lpl", spec.use_lpl)):
            if on:
                terms[name] = 0.0
        return LossResult(0.0, grads, terms)

    z, cache = model.extract(np.concatenate([x_k, x_m]) if n_m else x_k)
    n = n_k + n_m
    q_t = softmax(model.head_logits(z, t))
    dlog: dict[int, np.ndarray] = {}

    def acc(level: int, rows: np.ndarray, grad: np.ndarray) -> None:
        if level not in dlog:
            dlog[level] = np.zeros((n, model.level_sizes[level]))
        dlog[level][rows] += grad

    row_weight = np.concatenate([np.full(n_k, 1.0 / max(n_k, 1)), np.full(n_m, 1.0 / max(n_m, 1))])

    if spec.use_base:
        value = 0.0
        if n_k:
            loss, grad = _hard_ce_rows(q_t[:n_k], batch_new.y)
            value = float(loss.sum() / n_k)
            acc(t, np.arange(n_k), grad / n_k)
        terms["base"] = value

    if spec.use_joint or spec.use_lpl:
        joint_value = lpl_value = 0.0
        for t_prime in range(t):
            rows_k, lab_k = _coarse_rows(batch_new, t_prime, taxonomy, 0)
            if not spec.apply_coarse_on_new:
                rows_k, lab_k = rows_k[:0], lab_k[:0]
            rows_m, lab_m = _coarse_rows(batch_old, t_prime, taxonomy, n_k)
            rows = np.concatenate([rows_k, rows_m])
            labels = np.concatenate([lab_k, lab_m])
            if not len(rows):
                continue
            w = row_weight[rows][:, None]
            if spec.use_joint:
                q_c = softmax(model.head_logits(z[rows], t_prime))
                loss, grad = _hard_ce_rows(q_c, labels)
                joint_value += float((loss * w[:, 0]).sum())
                acc(t_prime, rows, grad * w)
            if spec.use_lpl:
                key = (t, t_prime)
                if key not in edges:
                    edges[key] = build_edge_matrix(taxonomy, t, t_prime)
                e = edges[key]
                loss, grad = marginal_cross_entropy(q_t[rows], e, _one_hot(labels, e.shape[1]))
                lpl_value += float((loss * w[:, 0]).sum())
                acc(t, rows, grad * w)
        if spec.use_joint:
            terms["joint"] = joint_value
        if spec.use_lpl:
            terms["lpl"] = lpl_value

    considered = accepted = skipped = 0
    if spec.ssl is not SSL.NONE:
        ssl_value = 0.0
        if n_m:
            if pseudo is None:
                if spec.needs_teacher:
                    _, q_src, _ = teacher.forward(x_m, t, use_ema=True)
                elif spec.ssl is SSL.PL:
                    q_src = q_t[n_k:].copy()
                else:
                    _, q_src, _ = model.forward(x_w, t)
                allowed = None
                if spec.refinement is not Refinement.NONE:
                    allowed = descendant_mask(taxonomy, t, batch_old.y, batch_old.level)
                pseudo, skipped = make_pseudo_labels(spec, q_src, allowed)
            if len(pseudo) != n_m:
                raise ValueError("pseudo-labels do not match B_M")
            considered, accepted = n_m, int(pseudo.accepted.sum())
            rows = np.flatnonzero(pseudo.accepted)
            if len(rows):
                q_s = q_t[n_k + rows]
                target = pseudo.target[rows]
                loss = -(target * np.log(np.maximum(q_s, PROB_FLOOR))).sum(axis=1)
                ssl_value = float(loss.sum() / n_m)
                acc(t, n_k + rows, (q_s - target) / n_m)
        terms["ssl"] = ssl_value

    grads = model.backward(cache, dlog)
    return LossResult(
        value=float(sum(terms.values())),
        grads=grads,
        terms=terms,
        pseudo=pseudo,
        pl_considered=considered,
        pl_accepted=accepted,
        condition_skipped=skipped,
    )


def loss_joint(
    model: Model,
    batch_new: Batch,
    batch_old: Batch,
    taxonomy: Taxonomy,
    mask: np.ndarray | None = None,
    apply_coarse_on_new: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Old-head cross-entropy on every derivable coarse label; ``mask`` excludes B_M rows."""
    if mask is not None:
        batch_old = dataclasses.replace(batch_old, mask=np.asarray(mask, dtype=bool))
    spec = LossSpec(use_base=False, use_joint=True, apply_coarse_on_new=apply_coarse_on_new)
    res = total_loss(spec, model, None, batch_new, batch_old, taxonomy)
    return res.value, res.grads


def loss_lpl(
    model: Model,
    batch_new: Batch,
    batch_old: Batch,
    taxonomy: Taxonomy,
    mask: np.ndarray | None = None,
    apply_coarse_on_new: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Coarse cross-entropy of the marginalized fine head; ``mask`` excludes B_M rows."""
    if mask is not None:
        batch_old = dataclasses.replace(batch_old, mask=np.asarray(mask, dtype=bool))
    spec = LossSpec(use_base=False, use_lpl=True, apply_coarse_on_new=apply_coarse_on_new)
    res = total_loss(spec, model, None, batch_new, batch_old, taxonomy)
    return res.value, res.grads
