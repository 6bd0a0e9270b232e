"""Accuracy and worst-group accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGroup, EmptyInput, ShapeError


@dataclass
class EvalResult:
    split: str
    metric: str
    value: float
    per_group: dict[int, float] = field(default_factory=dict)
    n: int = 0


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError("preds and labels differ in length")
    if preds.size == 0:
        raise EmptyInput("accuracy of an empty set")
    return float(np.mean(preds == labels))


def group_accuracies(preds, labels, groups) -> dict[int, float]:
    preds, labels, groups = map(np.asarray, (preds, labels, groups))
    if not preds.shape == labels.shape == groups.shape:
        raise ShapeError("preds, labels and groups must align")
    if preds.size == 0:
        raise EmptyGroup("no samples")
    return {int(g): float(np.mean(preds[groups == g] == labels[groups == g])) for g in np.unique(groups)}


def worst_group_accuracy(preds, labels, groups, split: str = "", num_groups: int | None = None) -> EvalResult:
    """Minimum per-group accuracy over the groups present.

    With ``num_groups`` given, every group in ``0..num_groups-1`` must be
    present, otherwise ``EmptyGroup`` is raised.
    """
    per = group_accuracies(preds, labels, groups)
    if num_groups is not None:
        missing = sorted(set(range(num_groups)) - set(per))
        if missing:
            raise EmptyGroup(f"groups {missing} have no samples")
    return EvalResult(split, "wga", min(per.values()), per, int(np.asarray(labels).size))


def evaluate(preds, labels, groups, metric: str, split: str = "") -> EvalResult:
    """EvalResult for ``metric`` in {"accuracy", "wga"}; per-group values are always filled."""
    per = group_accuracies(preds, labels, groups)
    if metric == "wga":
        value = min(per.values())
    else:
        value = accuracy(preds, labels)
    return EvalResult(split, metric, value, per, int(np.asarray(labels).size))
