"""Multiclass evaluation: confusion matrix, one-vs-rest metrics, bootstrap CIs.

Conventions: confusion matrix rows are the true class, columns the predicted
class; every 0/0 ratio is defined as 0; macro values are unweighted means
over classes; macro accuracy is the mean of per-class sensitivities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from .errors import DegenerateInputError, PipelineError, ValidationError
from .rng import Xoshiro256StarStar, XoshiroLanes, derive_seed

R = TypeVar("R")


def safe_div(num: float, den: float) -> float:
    """num / den with the 0/0 (and x/0) convention -> 0."""
    return num / den if den != 0 else 0.0


def f1_from(precision: float, sensitivity: float) -> float:
    return safe_div(2.0 * precision * sensitivity, precision + sensitivity)


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # shape (K, K), rows = truth, cols = prediction

    def __post_init__(self):
        k = len(self.classes)
        if self.counts.shape != (k, k):
            raise ValidationError("confusion matrix shape does not match classes")


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    sensitivity: float
    specificity: float
    f1: float


@dataclass(frozen=True)
class MacroMetrics:
    f1: float
    precision: float
    sensitivity: float
    accuracy: float  # unweighted mean of per-class sensitivities


@dataclass(frozen=True)
class BootstrapCi:
    point: float
    lower: float
    upper: float
    level: float
    n_resamples: int


def confusion_matrix(
    predictions: Sequence[str], truths: Sequence[str], classes: Sequence[str]
) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise ValidationError(
            f"{len(predictions)} predictions vs {len(truths)} truths"
        )
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for pred, truth in zip(predictions, truths):
        if truth not in index:
            raise ValidationError(f"true label {truth!r} not in class order")
        if pred not in index:
            raise ValidationError(f"predicted label {pred!r} not in class order")
        counts[index[truth], index[pred]] += 1
    return ConfusionMatrix(tuple(classes), counts)


def class_metrics(cm: ConfusionMatrix, class_name: str) -> ClassMetrics:
    """One-vs-rest reduction of one class against the rest."""
    if class_name not in cm.classes:
        raise ValidationError(f"{class_name!r} not in class order")
    i = cm.classes.index(class_name)
    counts = cm.counts
    tp = int(counts[i, i])
    fn = int(counts[i, :].sum() - tp)
    fp = int(counts[:, i].sum() - tp)
    tn = int(counts.sum() - tp - fn - fp)
    precision = safe_div(tp, tp + fp)
    sensitivity = safe_div(tp, tp + fn)
    specificity = safe_div(tn, tn + fp)
    return ClassMetrics(precision, sensitivity, specificity,
                        f1_from(precision, sensitivity))


def macro_metrics(cm: ConfusionMatrix) -> MacroMetrics:
    per_class = [class_metrics(cm, c) for c in cm.classes]
    return MacroMetrics(
        f1=float(np.mean([m.f1 for m in per_class])),
        precision=float(np.mean([m.precision for m in per_class])),
        sensitivity=float(np.mean([m.sensitivity for m in per_class])),
        accuracy=float(np.mean([m.sensitivity for m in per_class])),
    )


def resample_indices(seed: int, n_records: int, n_resamples: int) -> np.ndarray:
    """Index matrix (n_resamples, n_records); row i is resample stream i.

    Stream i is the pinned generator seeded seed + i * lane stride, so
    resamples are independent of n_resamples ordering and parallelizable.
    """
    lanes = XoshiroLanes(seed, lanes=n_resamples)
    flat = lanes.integers_below(n_records, n_records * n_resamples)
    return flat.reshape(n_records, n_resamples).T


_MAX_REDRAWS = 100


def bootstrap_ci(
    metric_fn: Callable[[list[R]], float],
    records: Sequence[R],
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCi:
    """Percentile bootstrap of metric_fn over records resampled with replacement.

    The point estimate comes from the full record list. A resample on which
    metric_fn raises or returns NaN is redrawn from a fresh derived stream,
    up to a cap, then reported as an error. Bounds are widened, if needed,
    to include the point estimate so lower <= point <= upper always holds.
    """
    records = list(records)
    n = len(records)
    if n == 0:
        raise ValidationError("bootstrap needs at least one record")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level {level} outside (0, 1)")
    point = _metric_or_nan(metric_fn, records)
    if not np.isfinite(point):
        raise PipelineError("metric undefined on the full record set")
    idx = resample_indices(seed, n, n_resamples)
    stats = np.empty(n_resamples, dtype=np.float64)
    for i in range(n_resamples):
        value = _metric_or_nan(metric_fn, [records[j] for j in idx[i]])
        attempt = 0
        while not np.isfinite(value):
            attempt += 1
            if attempt > _MAX_REDRAWS:
                raise PipelineError(
                    f"metric undefined on resample {i} after {_MAX_REDRAWS} redraws"
                )
            rng = Xoshiro256StarStar(derive_seed(seed, "redraw", i, attempt))
            redraw = [records[rng.next_below(n)] for _ in range(n)]
            value = _metric_or_nan(metric_fn, redraw)
        stats[i] = value
    tail = (1.0 - level) / 2.0 * 100.0
    lower = float(np.percentile(stats, tail))
    upper = float(np.percentile(stats, 100.0 - tail))
    return BootstrapCi(point, min(lower, point), max(upper, point),
                       level, n_resamples)


def _metric_or_nan(metric_fn, sample) -> float:
    try:
        return float(metric_fn(sample))
    except (ZeroDivisionError, ValueError, ArithmeticError,
            DegenerateInputError):
        return float("nan")
