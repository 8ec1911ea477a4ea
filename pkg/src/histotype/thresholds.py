"""Precision-recall analysis and per-classifier operating points.

The decision rule is inclusive: a tile is called positive when its target
score is >= the threshold. Candidate thresholds are the midpoints between
adjacent distinct scores plus one sentinel below the minimum and one above
the maximum, so every achievable prediction set appears exactly once.

F-beta is computed directly from integer counts,
    ((1 + b^2) * tp) / ((1 + b^2) * tp + b^2 * fn + fp),
which keeps the value exactly reproducible from the confusion counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ValidationError


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray  # ascending candidates (sentinels unclamped)
    precision: np.ndarray   # precision at each candidate; 1.0 when no calls
    recall: np.ndarray      # recall at each candidate
    n_pos: int
    n_total: int


@dataclass(frozen=True)
class ThresholdChoice:
    classifier_id: str
    threshold: float  # clamped into [0, 1]
    criterion: str
    criterion_value: float


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ValidationError("scores and labels must be equal-length vectors")
    if scores.size == 0:
        raise ValidationError("empty score vector")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    if np.isnan(scores).any():
        raise ValidationError("scores contain NaN")
    return scores, labels


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints of adjacent distinct scores, plus below-min and above-max."""
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([distinct[0] - 0.5], mids, [distinct[-1] + 0.5]))


def _counts_at(scores_sorted: np.ndarray, pos_suffix: np.ndarray,
               thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(n_called, tp) for each threshold; scores_sorted ascending."""
    first = np.searchsorted(scores_sorted, thresholds, side="left")
    n_called = scores_sorted.size - first
    tp = pos_suffix[first]
    return n_called, tp


def pr_curve(scores, labels) -> PrCurve:
    scores, labels = _validate(scores, labels)
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    pos_suffix = np.concatenate((np.cumsum(l_sorted[::-1])[::-1], [0]))
    cands = candidate_thresholds(scores)
    n_called, tp = _counts_at(s_sorted, pos_suffix, cands)
    n_pos = int(labels.sum())
    precision = np.where(n_called > 0, tp / np.maximum(n_called, 1), 1.0)
    recall = tp / n_pos if n_pos > 0 else np.zeros_like(precision)
    return PrCurve(cands, precision, recall, n_pos, int(scores.size))


def optimal_threshold(scores, labels, beta: float = 1.0,
                      classifier_id: str = "") -> ThresholdChoice:
    """Candidate maximizing F-beta; ties go to the smallest threshold.

    When no candidate achieves a positive criterion value (no positive can
    be recovered, e.g. an all-negative validation set), there is no usable
    operating point and the choice falls back to predict-nothing: the
    above-max sentinel. The returned threshold is clamped into [0, 1];
    clamping can only bind at the extremes, where the inclusive >= rule
    keeps the induced prediction set's criterion value unchanged.
    """
    scores, labels = _validate(scores, labels)
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    pos_suffix = np.concatenate((np.cumsum(labels[order][::-1])[::-1], [0]))
    cands = candidate_thresholds(scores)
    n_called, tp = _counts_at(s_sorted, pos_suffix, cands)
    n_pos = int(labels.sum())
    fn = n_pos - tp
    fp = n_called - tp
    b2 = beta * beta
    denom = (1.0 + b2) * tp + b2 * fn + fp
    values = np.where(denom > 0, (1.0 + b2) * tp / np.maximum(denom, 1e-300), 0.0)
    best = float(values.max())
    if best <= 0.0:
        pick = len(cands) - 1
    else:
        pick = int(np.argmax(values))  # first max = smallest threshold
    threshold = float(min(1.0, max(0.0, cands[pick])))
    name = "f1" if beta == 1.0 else f"f{beta:g}"
    return ThresholdChoice(classifier_id, threshold, name, float(values[pick]))


def average_precision(scores, labels) -> float:
    """Step-sum AP: sum of (recall step) * (precision at that threshold).

    Thresholds walk the candidate set from high to low; precision at zero
    calls is taken as 1 (it multiplies a zero recall step either way).
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateInputError("average precision undefined without positives")
    curve = pr_curve(scores, labels)
    precision = curve.precision[::-1]  # descending thresholds
    recall = curve.recall[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))


# --- operating point IO -----------------------------------------------------

THRESHOLD_HEADER = "classifier_id,threshold,criterion,criterion_value"


def save_thresholds(choices, path: str | Path) -> None:
    rows = [THRESHOLD_HEADER]
    seen = set()
    for c in choices:
        if c.classifier_id in seen:
            raise ValidationError(
                f"duplicate threshold for classifier {c.classifier_id!r}")
        seen.add(c.classifier_id)
        rows.append(f"{c.classifier_id},{c.threshold:.17g},"
                    f"{c.criterion},{c.criterion_value:.17g}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_thresholds(path: str | Path) -> list[ThresholdChoice]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != THRESHOLD_HEADER:
        raise ValidationError(
            f"threshold file must start with {THRESHOLD_HEADER!r}")
    out = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValidationError(f"threshold row {lineno}: expected 4 fields")
        classifier_id, threshold, criterion, value = (p.strip() for p in parts)
        if classifier_id in seen:
            raise ValidationError(
                f"threshold row {lineno}: duplicate {classifier_id!r}")
        seen.add(classifier_id)
        try:
            choice = ThresholdChoice(classifier_id, float(threshold),
                                     criterion, float(value))
        except ValueError:
            raise ValidationError(
                f"threshold row {lineno}: non-numeric field") from None
        if not 0.0 <= choice.threshold <= 1.0:
            raise ValidationError(
                f"threshold row {lineno}: threshold outside [0, 1]")
        out.append(choice)
    return out
