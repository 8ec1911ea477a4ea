"""Cohort manifest ingest, patient-level splits, quotas, one-vs-rest sets.

Manifest CSV columns: wsi_id,patient_id,label,image_path,source_mpp.
Fields never contain commas, so the format needs no quoting. Split
assignments serialize as wsi_id,set sorted by wsi_id.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence, TypeVar

from . import CLASS_ORDER
from .errors import ManifestError, ValidationError
from .rng import Xoshiro256StarStar, derive_seed

log = logging.getLogger("histotype.manifest")

SUBTYPING = "subtyping"
TUMOR_DETECTION = "tumor-detection"

TUMOR_LABELS = ("tumor-annotated", "non-tumor-annotated")
SET_NAMES = ("cnn_train", "cnn_val", "xgb_set", "test")

MANIFEST_HEADER = "wsi_id,patient_id,label,image_path,source_mpp"

T = TypeVar("T")


@dataclass(frozen=True)
class SlideRecord:
    wsi_id: str
    patient_id: str
    label: str
    image_path: str
    source_mpp: float


@dataclass(frozen=True)
class CohortManifest:
    task: str
    records: tuple[SlideRecord, ...]

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.wsi_id in seen:
                raise ManifestError(f"duplicate wsi_id {rec.wsi_id!r}")
            seen.add(rec.wsi_id)

    def by_wsi(self) -> dict[str, SlideRecord]:
        return {rec.wsi_id: rec for rec in self.records}

    def labels(self) -> dict[str, str]:
        return {rec.wsi_id: rec.label for rec in self.records}


@dataclass(frozen=True)
class SplitAssignment:
    sets: Mapping[str, str]  # wsi_id -> one of SET_NAMES

    def wsis_in(self, set_name: str) -> list[str]:
        if set_name not in SET_NAMES:
            raise ValidationError(f"unknown split set {set_name!r}")
        return sorted(w for w, s in self.sets.items() if s == set_name)


@dataclass(frozen=True)
class QuotaPolicy:
    """Per-class tile quota; the string 'all' disables sampling for a class."""

    quotas: Mapping[str, int | str] = field(default_factory=dict)

    def for_label(self, label: str) -> int | None:
        q = self.quotas.get(label, "all")
        if q == "all":
            return None
        q = int(q)
        if q < 0:
            raise ValidationError(f"negative quota for {label!r}")
        return q


def _task_for_labels(labels: set[str]) -> str:
    if labels <= set(CLASS_ORDER):
        return SUBTYPING
    if labels <= set(TUMOR_LABELS):
        return TUMOR_DETECTION
    raise ManifestError(f"labels {sorted(labels)} fit no known task")


def load_manifest(path: str | Path, task: str | None = None) -> CohortManifest:
    """Parse and validate a cohort manifest; task is inferred when omitted."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"manifest must start with header {MANIFEST_HEADER!r}")
    if task is not None and task not in (SUBTYPING, TUMOR_DETECTION):
        raise ValidationError(f"unknown task {task!r}")
    allowed = None
    if task == SUBTYPING:
        allowed = set(CLASS_ORDER)
    elif task == TUMOR_DETECTION:
        allowed = set(TUMOR_LABELS)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ManifestError(f"row {lineno}: expected 5 fields, got {len(parts)}")
        wsi_id, patient_id, label, image_path, mpp_text = (p.strip() for p in parts)
        if not wsi_id or not patient_id or not image_path:
            raise ManifestError(f"row {lineno}: empty field")
        if allowed is not None and label not in allowed:
            raise ManifestError(f"row {lineno}: unknown label {label!r} for {task}")
        try:
            mpp = float(mpp_text)
        except ValueError:
            raise ManifestError(f"row {lineno}: bad source_mpp {mpp_text!r}") from None
        if not mpp > 0:
            raise ManifestError(f"row {lineno}: source_mpp must be positive")
        records.append(SlideRecord(wsi_id, patient_id, label, image_path, mpp))
    if not records:
        raise ManifestError("manifest has no data rows")
    if task is None:
        task = _task_for_labels({r.label for r in records})
    return CohortManifest(task, tuple(records))


def save_manifest(manifest: CohortManifest, path: str | Path) -> None:
    rows = [MANIFEST_HEADER]
    for rec in manifest.records:
        for val in (rec.wsi_id, rec.patient_id, rec.label, rec.image_path):
            if "," in val:
                raise ValidationError(f"comma in manifest field {val!r}")
        rows.append(f"{rec.wsi_id},{rec.patient_id},{rec.label},"
                    f"{rec.image_path},{rec.source_mpp:g}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def _majority_label(labels: Sequence[str]) -> str:
    tally: dict[str, int] = {}
    for lab in labels:
        tally[lab] = tally.get(lab, 0) + 1
    best = max(tally.values())
    return min(lab for lab, n in tally.items() if n == best)


def stratified_patient_split(
    manifest: CohortManifest,
    fractions: Sequence[float],
    seed: int,
) -> SplitAssignment:
    """Assign whole patients to sets, stratified by patient-level class.

    A patient's class is the majority label over their WSIs (ties go to the
    lexicographically smallest label). Within each class, patients are
    shuffled with the pinned generator and cut at the rounded cumulative
    fractions, so per-class proportions hold to +-1 patient.
    """
    if len(fractions) != len(SET_NAMES):
        raise ValidationError(f"expected {len(SET_NAMES)} fractions")
    if any(f < 0 for f in fractions):
        raise ValidationError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions sum to {sum(fractions)}, expected 1")

    by_patient: dict[str, list[SlideRecord]] = {}
    for rec in manifest.records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    patient_class = {
        pid: _majority_label([r.label for r in recs])
        for pid, recs in by_patient.items()
    }
    classes = sorted(set(patient_class.values()))
    n_nonempty = sum(1 for f in fractions if f > 0)

    rng = Xoshiro256StarStar(derive_seed(seed, "patient-split"))
    assignment: dict[str, str] = {}
    for cls in classes:
        patients = sorted(p for p, c in patient_class.items() if c == cls)
        if len(patients) < n_nonempty:
            raise ValidationError(
                f"class {cls!r} has {len(patients)} patients for "
                f"{n_nonempty} non-empty split fractions"
            )
        rng.shuffle(patients)
        n = len(patients)
        cuts = []
        acc = 0.0
        for frac in fractions:
            acc += frac
            cuts.append(math.floor(acc * n + 0.5))
        cuts[-1] = n
        start = 0
        for set_name, cut in zip(SET_NAMES, cuts):
            cut = max(cut, start)
            for pid in patients[start:cut]:
                for rec in by_patient[pid]:
                    assignment[rec.wsi_id] = set_name
            start = cut
    return SplitAssignment(assignment)


def save_split(split: SplitAssignment, path: str | Path) -> None:
    rows = ["wsi_id,set"]
    for wsi_id in sorted(split.sets):
        rows.append(f"{wsi_id},{split.sets[wsi_id]}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> SplitAssignment:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "wsi_id,set":
        raise ManifestError("split file must start with header 'wsi_id,set'")
    sets: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ManifestError(f"split row {lineno}: expected 2 fields")
        wsi_id, set_name = parts[0].strip(), parts[1].strip()
        if set_name not in SET_NAMES:
            raise ManifestError(f"split row {lineno}: unknown set {set_name!r}")
        if wsi_id in sets:
            raise ManifestError(f"split row {lineno}: duplicate wsi_id {wsi_id!r}")
        sets[wsi_id] = set_name
    return SplitAssignment(sets)


def sample_tile_quota(
    tiles: Sequence[T], label: str, policy: QuotaPolicy, seed: int
) -> list[T]:
    """Uniform sample without replacement down to the class quota.

    Shortfall is legal: when fewer tiles exist than the quota, all tiles
    pass through; tiles are never duplicated to fill a quota. The selected
    subset keeps the input order.
    """
    quota = policy.for_label(label)
    if quota is None or len(tiles) <= quota:
        return list(tiles)
    rng = Xoshiro256StarStar(derive_seed(seed, "quota", label))
    picked = sorted(rng.sample(range(len(tiles)), quota))
    return [tiles[i] for i in picked]


def build_ovr_dataset(
    target: str,
    tiles_by_class: Mapping[str, Sequence[T]],
    seed: int,
) -> list[tuple[T, str]]:
    """Tile set for one one-vs-rest classifier.

    Positives: every tile of the target class. Negatives: floor(n_c / 3)
    tiles sampled without replacement from each non-target class c.
    """
    if set(tiles_by_class) != set(CLASS_ORDER):
        raise ValidationError(
            f"expected exactly the classes {list(CLASS_ORDER)}, "
            f"got {sorted(tiles_by_class)}"
        )
    if target not in CLASS_ORDER:
        raise ValidationError(f"unknown target class {target!r}")
    positives = list(tiles_by_class[target])
    if not positives:
        raise ValidationError(f"target class {target!r} has no tiles")
    dataset: list[tuple[T, str]] = [(tile, "target") for tile in positives]
    total_negatives = 0
    for cls in CLASS_ORDER:
        if cls == target:
            continue
        pool = list(tiles_by_class[cls])
        take = len(pool) // 3
        rng = Xoshiro256StarStar(derive_seed(seed, "ovr", target, cls))
        picked = sorted(rng.sample(range(len(pool)), take))
        dataset.extend((pool[i], "rest") for i in picked)
        total_negatives += take
    if total_negatives == 0:
        log.warning("one-vs-rest set for %s has no rest tiles", target)
    return dataset
