"""Per-WSI feature vectors: tile-count aggregation over OvR scores.

Each WSI is summarized by 8 counts, one (target, rest) pair per subtype
classifier in class order: how many of its tumor tiles score at or above
that classifier's threshold, and how many do not. Raw counts are the
default; a fraction mode normalizes by tile count for cohorts with very
uneven tile numbers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import CLASS_ORDER
from .errors import ValidationError
from .rng import Xoshiro256StarStar, derive_seed
from .scoring import ScoreTable
from .thresholds import ThresholdChoice

log = logging.getLogger("histotype.features")

FEATURE_COLUMNS = ("c_lumA", "c_not_lumA", "c_lumB", "c_not_lumB",
                   "c_her2", "c_not_her2", "c_basal", "c_not_basal")
FEATURE_HEADER = "wsi_id,n_tiles," + ",".join(FEATURE_COLUMNS)


def classify_tile(target_score: float, threshold: float,
                  inclusive: bool = True) -> bool:
    """True when the tile counts toward the target class."""
    if inclusive:
        return target_score >= threshold
    return target_score > threshold


@dataclass(frozen=True)
class WsiFeatureVector:
    wsi_id: str
    counts: tuple[int, ...]  # (target, rest) per class in CLASS_ORDER
    n_tiles: int
    label: str | None = None

    def __post_init__(self):
        if len(self.counts) != 2 * len(CLASS_ORDER):
            raise ValidationError("feature vector needs 8 counts")
        if any(c < 0 for c in self.counts) or self.n_tiles < 0:
            raise ValidationError("counts must be non-negative")
        for k in range(len(CLASS_ORDER)):
            if self.counts[2 * k] + self.counts[2 * k + 1] != self.n_tiles:
                raise ValidationError(
                    f"counts for {CLASS_ORDER[k]} do not partition "
                    f"{self.n_tiles} tiles")

    def fractions(self) -> tuple[float, ...]:
        if self.n_tiles == 0:
            return tuple(0.0 for _ in self.counts)
        return tuple(c / self.n_tiles for c in self.counts)


def thresholds_by_class(
    choices: Iterable[ThresholdChoice],
) -> dict[str, float]:
    out = {}
    for choice in choices:
        if choice.classifier_id in out:
            raise ValidationError(
                f"duplicate threshold for {choice.classifier_id}")
        out[choice.classifier_id] = choice.threshold
    missing = [c for c in CLASS_ORDER if c not in out]
    if missing:
        raise ValidationError(f"missing thresholds for {missing}")
    return out


def cap_tiles(tile_ids: Sequence[str], cap: int | None, seed: int,
              wsi_id: str) -> list[str]:
    """Optional per-WSI tile budget: a seeded subset in input order."""
    tile_ids = list(tile_ids)
    if cap is None or len(tile_ids) <= cap:
        return tile_ids
    if cap < 0:
        raise ValidationError("tile cap must be non-negative")
    rng = Xoshiro256StarStar(derive_seed(seed, "tile-cap", wsi_id))
    picks = sorted(rng.sample(range(len(tile_ids)), cap))
    return [tile_ids[i] for i in picks]


def aggregate_counts(
    table: ScoreTable,
    tile_ids: Sequence[str],
    thresholds: Mapping[str, float],
    wsi_id: str,
    inclusive: bool = True,
    label: str | None = None,
) -> WsiFeatureVector:
    """Tally the 8 counts for one WSI's tumor tiles.

    Every tile must have a score under all four subtype classifiers;
    a WSI with no tumor tiles yields the zero vector with a warning.
    """
    for cls in CLASS_ORDER:
        if cls not in thresholds:
            raise ValidationError(f"no threshold for class {cls}")
    tile_ids = list(tile_ids)
    if len(set(tile_ids)) != len(tile_ids):
        raise ValidationError(f"duplicate tile ids for WSI {wsi_id}")
    if not tile_ids:
        log.warning("WSI %s has no tumor tiles; emitting a zero vector",
                    wsi_id)
    counts = [0] * (2 * len(CLASS_ORDER))
    for tile_id in tile_ids:
        for k, cls in enumerate(CLASS_ORDER):
            score = table.target_score(tile_id, cls)
            hit = classify_tile(score, thresholds[cls], inclusive)
            counts[2 * k + (0 if hit else 1)] += 1
    return WsiFeatureVector(wsi_id, tuple(counts), len(tile_ids), label)


def build_feature_matrix(
    vectors: Iterable[WsiFeatureVector],
    fractions: bool = False,
) -> tuple[np.ndarray, list[str], list[str] | None]:
    """Stack per-WSI vectors into a matrix with rows sorted by wsi_id.

    Returns (matrix, wsi_ids, labels); labels is None when no vector
    carries one, and partial labeling is rejected.
    """
    ordered = sorted(vectors, key=lambda v: v.wsi_id)
    if not ordered:
        raise ValidationError("no feature vectors to stack")
    ids = [v.wsi_id for v in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate wsi_id in feature vectors")
    labeled = [v.label is not None for v in ordered]
    if any(labeled) and not all(labeled):
        raise ValidationError("feature vectors are only partially labeled")
    rows = [v.fractions() if fractions else v.counts for v in ordered]
    matrix = np.asarray(rows, dtype=np.float64)
    labels = [v.label for v in ordered] if all(labeled) else None
    return matrix, ids, labels


# --- persistence -------------------------------------------------------------

def save_features(vectors: Iterable[WsiFeatureVector],
                  path: str | Path) -> None:
    ordered = sorted(vectors, key=lambda v: v.wsi_id)
    labeled = [v.label is not None for v in ordered]
    if any(labeled) and not all(labeled):
        raise ValidationError("feature vectors are only partially labeled")
    with_label = bool(ordered) and all(labeled)
    header = FEATURE_HEADER + (",label" if with_label else "")
    lines = [header]
    for v in ordered:
        fields = [v.wsi_id, str(v.n_tiles)] + [str(c) for c in v.counts]
        if with_label:
            fields.append(v.label)
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_features(path: str | Path) -> list[WsiFeatureVector]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] not in (FEATURE_HEADER,
                                     FEATURE_HEADER + ",label"):
        raise ValidationError(f"{path}: unrecognized feature file header")
    with_label = lines[0].endswith(",label")
    n_fields = 10 + (1 if with_label else 0)
    out = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n_fields:
            raise ValidationError(
                f"{path}:{number}: expected {n_fields} fields")
        try:
            n_tiles = int(parts[1])
            counts = tuple(int(p) for p in parts[2:10])
        except ValueError:
            raise ValidationError(
                f"{path}:{number}: non-integer count") from None
        label = parts[10] if with_label else None
        try:
            out.append(WsiFeatureVector(parts[0], counts, n_tiles, label))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{number}: {exc}") from None
    return out
