"""Class-mean accuracy (mAcc) at any ontology level."""

from __future__ import annotations

import numpy as np

from leco.model import Model
from leco.ontology import Taxonomy, build_edge_matrix, coarsen_labels


def mean_class_accuracy(predictions, truths, num_classes: int) -> tuple[float, np.ndarray]:
    """Unweighted mean of per-class accuracies.

    Returns ``(mAcc, per_class)`` where ``per_class[c]`` is NaN for classes
    absent from ``truths``; those are left out of the mean.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if len(truths) == 0:
        raise ValueError("cannot score an empty set")
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    if truths.min() < 0 or truths.max() >= num_classes:
        raise ValueError("truth label outside [0, num_classes)")
    total = np.bincount(truths, minlength=num_classes)
    correct = np.bincount(truths[predictions == truths], minlength=num_classes)
    per_class = np.full(num_classes, np.nan)
    present = total > 0
    per_class[present] = correct[present] / total[present]
    return float(per_class[present].mean()), per_class


def predict_at_level(
    model: Model,
    x: np.ndarray,
    taxonomy: Taxonomy,
    level: int,
    use_ema: bool = True,
) -> np.ndarray:
    """Argmax at ``level`` using the model's finest head, marginalized when ``level`` is coarser."""
    finest = model.level
    if not 0 <= level <= finest:
        raise ValueError(f"level {level} out of range for a model with heads 0..{finest}")
    q = model.predict_proba(x, finest, use_ema=use_ema)
    if level < finest:
        q = q @ build_edge_matrix(taxonomy, finest, level)
    return np.argmax(q, axis=1)


def evaluate_at_level(
    model: Model,
    x: np.ndarray,
    labels: np.ndarray,
    taxonomy: Taxonomy,
    level: int,
    use_ema: bool = True,
    label_level: int | None = None,
) -> float:
    """mAcc at ``level``; ``labels`` are given at ``label_level`` (default: finest taxonomy level)."""
    label_level = taxonomy.num_levels - 1 if label_level is None else label_level
    if not 0 <= level < taxonomy.num_levels:
        raise ValueError(f"level {level} out of range")
    truths = coarsen_labels(taxonomy, labels, label_level, level)
    preds = predict_at_level(model, x, taxonomy, level, use_ema)
    return mean_class_accuracy(preds, truths, taxonomy.level_sizes[level])[0]
