"""Stage orchestration over a shared work directory.

Stages run in a fixed order, each consuming files written by earlier
stages and writing its own outputs plus a provenance record (hash of
the config keys that matter to it, input file hashes, the stage seed,
output hashes). A stage whose provenance still matches the current
config and inputs, and whose outputs are intact, is skipped. Every
stage is deterministic given config and inputs, so skipping is exact:
deleting one stage's outputs re-runs that stage, and later stages
re-run only when upstream bytes actually changed.

Per-stage seeds are derived from the master seed and the stage name,
so no stage's randomness depends on which other stages ran. Logs go to
stderr; files are the only data interface between stages.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shlex
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from . import CLASS_ORDER, TUMOR_CLASSIFIER
from .config import PipelineConfig, stage_config_hash
from .errors import (ConfigError, DegenerateInputError, HistotypeError,
                     StageInputError, ValidationError)
from .features import (aggregate_counts, build_feature_matrix, cap_tiles,
                       load_features, save_features, thresholds_by_class)
from .gbdt import TrainConfig, deserialize, serialize
from .gbdt import predict as gbdt_predict
from .gbdt import predict_proba
from .gbdt import train as gbdt_train
from .heatmap import HeatmapSpec, save_sidecar, scored_from_records, \
    stitch_heatmap
from .manifest import (SUBTYPING, CohortManifest, QuotaPolicy, load_manifest,
                       load_split, sample_tile_quota, save_split,
                       stratified_patient_split)
from .metrics import (bootstrap_ci, class_metrics, confusion_matrix,
                      macro_metrics)
from .rng import Xoshiro256StarStar, derive_seed
from .scoring import (ScoreTable, SubprocessScorer, SyntheticScorer,
                      filter_tumor_tiles, load_scores, save_scores,
                      score_tiles)
from .stain import (build_reference_mosaic, estimate_stain_profile,
                    load_profile, normalize_tile, rgb_to_od, save_profile)
from .synthetic import (category_truth_path, load_category_raster,
                        tumor_positive_tiles)
from .thresholds import (ThresholdChoice, average_precision, load_thresholds,
                         optimal_threshold, save_thresholds)
from .tiling import (RasterImage, TileRecord, detect_tissue, extract_tile,
                     load_image, load_tile_manifest, plan_tiles,
                     resample_to_target_mpp, save_image, save_tile_manifest)

log = logging.getLogger(__name__)

STAGES = ("tile", "split", "build-ref", "normalize", "score", "threshold",
          "features", "train", "predict", "evaluate", "heatmap")

# a tile is true-tumor for the synthetic scorer when at least half of its
# footprint lies on tumor in the category raster
TRUTH_TUMOR_FRACTION = 0.5

NORMALIZED_HEADER = "tile_id,wsi_id,path"
PREDICTION_HEADER = ("wsi_id,label,predicted,"
                     + ",".join(f"p_{cls}" for cls in CLASS_ORDER))
REPORT_METRICS = ("precision", "sensitivity", "specificity", "f1", "auprc")
REPORT_HEADER = "row,n," + ",".join(
    f"{m},{m}_lower,{m}_upper" for m in REPORT_METRICS)


@dataclass(frozen=True)
class WorkLayout:
    root: Path

    @property
    def tiles_dir(self) -> Path:
        return self.root / "tiles"

    @property
    def tile_manifest(self) -> Path:
        return self.tiles_dir / "tiles.csv"

    def tile_image(self, record: TileRecord) -> Path:
        return self.tiles_dir / record.wsi_id / f"{record.tile_id}.png"

    @property
    def split_path(self) -> Path:
        return self.root / "splits.csv"

    @property
    def reference_dir(self) -> Path:
        return self.root / "reference"

    @property
    def mosaic_path(self) -> Path:
        return self.reference_dir / "mosaic.png"

    @property
    def profile_path(self) -> Path:
        return self.reference_dir / "profile.stain"

    @property
    def mosaic_cells_path(self) -> Path:
        return self.reference_dir / "cells.csv"

    @property
    def tumor_scores_path(self) -> Path:
        return self.root / "scores" / "tumor.csv"

    @property
    def subtype_scores_path(self) -> Path:
        return self.root / "scores" / "subtypes.csv"

    @property
    def normalized_dir(self) -> Path:
        return self.root / "normalized"

    @property
    def normalized_manifest(self) -> Path:
        return self.normalized_dir / "normalized.csv"

    @property
    def thresholds_path(self) -> Path:
        return self.root / "thresholds.csv"

    @property
    def features_path(self) -> Path:
        return self.root / "features.csv"

    @property
    def model_path(self) -> Path:
        return self.root / "model.gbdt"

    @property
    def predictions_path(self) -> Path:
        return self.root / "predictions.csv"

    @property
    def report_csv_path(self) -> Path:
        return self.root / "report" / "report.csv"

    @property
    def report_txt_path(self) -> Path:
        return self.root / "report" / "report.txt"

    @property
    def heatmaps_dir(self) -> Path:
        return self.root / "heatmaps"

    @property
    def provenance_dir(self) -> Path:
        return self.root / "provenance"


@dataclass(frozen=True)
class PipelineContext:
    config: PipelineConfig
    config_text: str
    overrides: tuple[str, ...]
    layout: WorkLayout

    @classmethod
    def from_config(cls, config: PipelineConfig, config_text: str,
                    overrides: Sequence[str] = ()) -> "PipelineContext":
        return cls(config, config_text, tuple(overrides),
                   WorkLayout(config.work_dir))

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)


# --- shared helpers ---------------------------------------------------------

def _slide_path(ctx: PipelineContext, image_path: str) -> Path:
    return ctx.config.manifest.parent / image_path


def _load_cohort(ctx: PipelineContext) -> CohortManifest:
    return load_manifest(ctx.config.manifest, task=SUBTYPING)


def _records_by_wsi(records: Sequence[TileRecord]
                    ) -> dict[str, list[TileRecord]]:
    grouped: dict[str, list[TileRecord]] = {}
    for record in records:
        grouped.setdefault(record.wsi_id, []).append(record)
    return grouped


def _working_slide(ctx: PipelineContext, rec) -> RasterImage:
    image = load_image(_slide_path(ctx, rec.image_path), rec.source_mpp)
    return resample_to_target_mpp(image, ctx.config.target_mpp)


def _synthetic_positives(ctx: PipelineContext, classifier_id: str,
                         records_by_wsi: Mapping[str, Sequence[TileRecord]],
                         labels: Mapping[str, str]) -> set[str]:
    """True tiles under one classifier, read from the category rasters."""
    truth_dir = ctx.config.scorer_truth_dir
    positives: set[str] = set()
    for wsi_id in sorted(records_by_wsi):
        if classifier_id != TUMOR_CLASSIFIER \
                and labels[wsi_id] != classifier_id:
            continue
        raster = load_category_raster(
            category_truth_path(truth_dir, wsi_id))
        positives |= tumor_positive_tiles(
            raster, records_by_wsi[wsi_id], ctx.config.tile_size,
            TRUTH_TUMOR_FRACTION)
    return positives


def _make_scorer(ctx: PipelineContext, classifier_id: str,
                 records_by_wsi: Mapping[str, Sequence[TileRecord]],
                 labels: Mapping[str, str]):
    cfg = ctx.config
    if cfg.scorer_command:
        command = shlex.split(cfg.scorer_command) \
            + ["--classifier", classifier_id]
        return SubprocessScorer(command, classifier_id, cfg.strict_pairs)
    if cfg.scorer_truth_dir is None:
        raise ConfigError(
            "the synthetic scorer needs scorer.truth_dir; set "
            "scorer.command to use an external scorer instead")
    positives = _synthetic_positives(ctx, classifier_id, records_by_wsi,
                                     labels)
    return SyntheticScorer(classifier_id, positives, cfg.scorer_signal,
                           cfg.seed)


def _downsample_image(image: RasterImage, factor: int) -> RasterImage:
    """Box-filtered reduction with ceil dimensions (footprint-aligned)."""
    if factor == 1:
        return image
    width = -(-image.width // factor)
    height = -(-image.height // factor)
    pixels = np.asarray(Image.fromarray(image.pixels)
                        .resize((width, height), Image.BOX))
    return RasterImage(pixels, image.mpp * factor)


def _save_normalized_manifest(rows: Sequence[tuple[str, str, str]],
                              path: Path) -> None:
    lines = [NORMALIZED_HEADER]
    lines += [f"{tile_id},{wsi_id},{rel}" for tile_id, wsi_id, rel in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class NormalizedTile:
    tile_id: str
    wsi_id: str
    path: str  # relative to the work root


def load_normalized_manifest(path: str | Path) -> list[NormalizedTile]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != NORMALIZED_HEADER:
        raise ValidationError(
            f"normalized manifest must start with {NORMALIZED_HEADER!r}")
    rows = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or not all(parts):
            raise ValidationError(
                f"normalized manifest row {lineno}: expected 3 fields")
        if parts[0] in seen:
            raise ValidationError(
                f"normalized manifest row {lineno}: duplicate tile "
                f"{parts[0]!r}")
        seen.add(parts[0])
        rows.append(NormalizedTile(*parts))
    return rows


# --- stage bodies -----------------------------------------------------------

def _run_tile(ctx: PipelineContext) -> None:
    cfg = ctx.config
    manifest = _load_cohort(ctx)
    ctx.layout.tiles_dir.mkdir(parents=True, exist_ok=True)
    all_records: list[TileRecord] = []
    for rec in sorted(manifest.records, key=lambda r: r.wsi_id):
        image = _working_slide(ctx, rec)
        mask = detect_tissue(image, cfg.mask_downsample)
        grid = plan_tiles(image.width, image.height, cfg.tile_size,
                          cfg.overlap_for(rec.label), mask,
                          cfg.min_tissue_fraction, rec.wsi_id)
        wsi_dir = ctx.layout.tiles_dir / rec.wsi_id
        wsi_dir.mkdir(parents=True, exist_ok=True)
        for tile in grid.records:
            pixels = extract_tile(image, tile.x, tile.y, cfg.tile_size)
            save_image(pixels, wsi_dir / f"{tile.tile_id}.png")
        all_records.extend(grid.records)
        log.info("tile: %s kept %d tiles (overlap %d)", rec.wsi_id,
                 len(grid.records), cfg.overlap_for(rec.label))
    save_tile_manifest(all_records, ctx.layout.tile_manifest)


def _run_split(ctx: PipelineContext) -> None:
    manifest = _load_cohort(ctx)
    split = stratified_patient_split(manifest, ctx.config.split_fractions,
                                     ctx.stage_seed("split"))
    save_split(split, ctx.layout.split_path)
    counts = {name: len(split.wsis_in(name))
              for name in ("cnn_train", "cnn_val", "xgb_set", "test")}
    log.info("split: %s", counts)


def _run_build_ref(ctx: PipelineContext) -> None:
    cfg = ctx.config
    layout = ctx.layout
    manifest = _load_cohort(ctx)
    labels = manifest.labels()
    records = load_tile_manifest(layout.tile_manifest)
    grouped = _records_by_wsi(records)
    split = load_split(layout.split_path)

    scorer = _make_scorer(ctx, TUMOR_CLASSIFIER, grouped, labels)
    requests = [(t.tile_id, str(layout.tile_image(t))) for t in records]
    table = score_tiles(scorer, requests)
    layout.tumor_scores_path.parent.mkdir(parents=True, exist_ok=True)
    save_scores(table, layout.tumor_scores_path)

    # the reference basis is fit on training slides only, so held-out
    # slides never shape the normalization target
    tile_paths_by_wsi: dict[str, list[Path]] = {}
    for wsi_id in split.wsis_in("cnn_train"):
        recs = grouped.get(wsi_id, [])
        tumor_ids = set(filter_tumor_tiles(
            table, [t.tile_id for t in recs], cfg.tumor_threshold))
        tile_paths_by_wsi[wsi_id] = [
            layout.tile_image(t) for t in recs if t.tile_id in tumor_ids]
    mosaic = build_reference_mosaic(
        tile_paths_by_wsi, cfg.reference_wsis, ctx.stage_seed("build-ref"),
        cfg.stain_i0, cfg.stain_beta, cfg.stain_alpha)
    layout.reference_dir.mkdir(parents=True, exist_ok=True)
    save_image(mosaic.image, layout.mosaic_path)
    save_profile(mosaic.profile, layout.profile_path)
    cells = ["cell,wsi_id,tile_id"]
    cells += [f"{i},{wsi},{tile}" for i, (wsi, tile)
              in enumerate(mosaic.provenance)]
    layout.mosaic_cells_path.write_text("\n".join(cells) + "\n",
                                        encoding="utf-8")
    log.info("build-ref: %d mosaic cells", len(mosaic.provenance))


def _select_wsi_tiles(ctx: PipelineContext, set_name: str, label: str,
                      wsi_id: str, tumor_records: list[TileRecord],
                      stage_seed: int) -> list[TileRecord]:
    """Training slides obey the class quota; others obey the tile cap."""
    cfg = ctx.config
    if set_name == "cnn_train":
        policy = QuotaPolicy({cls: ("all" if q is None else q)
                              for cls, q in cfg.quotas.items()})
        return sample_tile_quota(tumor_records, label, policy,
                                 derive_seed(stage_seed, wsi_id))
    ids = [t.tile_id for t in tumor_records]
    kept = set(cap_tiles(ids, cfg.features_max_tiles, stage_seed, wsi_id))
    return [t for t in tumor_records if t.tile_id in kept]


def _run_normalize(ctx: PipelineContext) -> None:
    cfg = ctx.config
    layout = ctx.layout
    labels = _load_cohort(ctx).labels()
    split = load_split(layout.split_path)
    grouped = _records_by_wsi(load_tile_manifest(layout.tile_manifest))
    table = load_scores(layout.tumor_scores_path, cfg.strict_pairs)
    reference = load_profile(layout.profile_path)
    seed = ctx.stage_seed("normalize")

    rows: list[tuple[str, str, str]] = []
    dropped = 0
    for wsi_id in sorted(grouped):
        recs = grouped[wsi_id]
        tumor_ids = set(filter_tumor_tiles(
            table, [t.tile_id for t in recs], cfg.tumor_threshold))
        tumor_recs = [t for t in recs if t.tile_id in tumor_ids]
        chosen = _select_wsi_tiles(ctx, split.sets[wsi_id], labels[wsi_id],
                                   wsi_id, tumor_recs, seed)
        out_dir = layout.normalized_dir / wsi_id
        out_dir.mkdir(parents=True, exist_ok=True)
        kept = 0
        for tile in chosen:
            pixels = load_image(layout.tile_image(tile),
                                cfg.target_mpp).pixels
            try:
                source = estimate_stain_profile(
                    rgb_to_od(pixels, cfg.stain_i0), cfg.stain_beta,
                    cfg.stain_alpha)
            except DegenerateInputError as exc:
                log.warning("normalize: dropping tile %s: %s",
                            tile.tile_id, exc)
                dropped += 1
                continue
            normalized = normalize_tile(pixels, source, reference,
                                        cfg.stain_i0)
            save_image(normalized, out_dir / f"{tile.tile_id}.png")
            rows.append((tile.tile_id, wsi_id,
                         f"normalized/{wsi_id}/{tile.tile_id}.png"))
            kept += 1
        log.info("normalize: %s kept %d of %d tumor tiles", wsi_id,
                 kept, len(tumor_recs))
    _save_normalized_manifest(rows, layout.normalized_manifest)
    if dropped:
        log.warning("normalize: dropped %d degenerate tiles", dropped)


def _run_score(ctx: PipelineContext) -> None:
    layout = ctx.layout
    labels = _load_cohort(ctx).labels()
    rows = load_normalized_manifest(layout.normalized_manifest)
    grouped_all = _records_by_wsi(load_tile_manifest(layout.tile_manifest))
    normalized_ids = {r.tile_id for r in rows}
    grouped = {
        wsi: [t for t in recs if t.tile_id in normalized_ids]
        for wsi, recs in grouped_all.items()}

    table = ScoreTable(strict_pairs=ctx.config.strict_pairs)
    requests = [(r.tile_id, str(layout.root / r.path)) for r in rows]
    for classifier_id in CLASS_ORDER:
        scorer = _make_scorer(ctx, classifier_id, grouped, labels)
        score_tiles(scorer, requests, table)
        log.info("score: %s scored %d tiles", classifier_id, len(requests))
    layout.subtype_scores_path.parent.mkdir(parents=True, exist_ok=True)
    save_scores(table, layout.subtype_scores_path)


def _threshold_pool(ctx: PipelineContext) -> list[tuple[str, str]]:
    """(tile_id, slide label) pairs the operating points are fit on.

    Dedicated validation slides are used whenever the split has them;
    otherwise a per-slide holdout is sampled from the training tiles.
    """
    layout = ctx.layout
    labels = _load_cohort(ctx).labels()
    split = load_split(layout.split_path)
    rows = load_normalized_manifest(layout.normalized_manifest)
    by_wsi: dict[str, list[str]] = {}
    for row in rows:
        by_wsi.setdefault(row.wsi_id, []).append(row.tile_id)

    val_wsis = split.wsis_in("cnn_val")
    if val_wsis:
        return [(tile_id, labels[wsi]) for wsi in val_wsis
                for tile_id in by_wsi.get(wsi, [])]
    seed = ctx.stage_seed("threshold")
    pool = []
    for wsi in split.wsis_in("cnn_train"):
        ids = sorted(by_wsi.get(wsi, []))
        if not ids:
            continue
        k = max(1, math.floor(ctx.config.cnn_internal_val * len(ids) + 0.5))
        rng = Xoshiro256StarStar(derive_seed(seed, "holdout", wsi))
        pool += [(tile_id, labels[wsi])
                 for tile_id in sorted(rng.sample(ids, k))]
    return pool


def _run_threshold(ctx: PipelineContext) -> None:
    cfg = ctx.config
    if cfg.thresholds_mode == "fixed":
        choices = [ThresholdChoice(cls, cfg.fixed_thresholds[cls], "fixed",
                                   cfg.fixed_thresholds[cls])
                   for cls in CLASS_ORDER]
        save_thresholds(choices, ctx.layout.thresholds_path)
        log.info("threshold: fixed operating points written")
        return
    table = load_scores(ctx.layout.subtype_scores_path, cfg.strict_pairs)
    pool = _threshold_pool(ctx)
    if not pool:
        raise StageInputError(
            "threshold: no validation tiles available; did normalize "
            "produce any tumor tiles?")
    choices = []
    for cls in CLASS_ORDER:
        scores = [table.target_score(tile_id, cls) for tile_id, _ in pool]
        truth = [1 if label == cls else 0 for _, label in pool]
        choice = optimal_threshold(scores, truth, classifier_id=cls)
        choices.append(choice)
        log.info("threshold: %s -> %.4f (%s=%.4f over %d tiles)", cls,
                 choice.threshold, choice.criterion, choice.criterion_value,
                 len(pool))
    save_thresholds(choices, ctx.layout.thresholds_path)


def _run_features(ctx: PipelineContext) -> None:
    layout = ctx.layout
    labels = _load_cohort(ctx).labels()
    split = load_split(layout.split_path)
    table = load_scores(layout.subtype_scores_path, ctx.config.strict_pairs)
    thresholds = thresholds_by_class(load_thresholds(layout.thresholds_path))
    by_wsi: dict[str, list[str]] = {}
    for row in load_normalized_manifest(layout.normalized_manifest):
        by_wsi.setdefault(row.wsi_id, []).append(row.tile_id)

    vectors = []
    for wsi_id in split.wsis_in("xgb_set") + split.wsis_in("test"):
        vectors.append(aggregate_counts(
            table, by_wsi.get(wsi_id, []), thresholds, wsi_id,
            label=labels[wsi_id]))
    save_features(vectors, layout.features_path)
    log.info("features: %d slides aggregated", len(vectors))


def _internal_split(manifest: CohortManifest, train_fraction: float,
                    seed: int) -> tuple[set[str], set[str]]:
    """Patient-level train/validation split inside the classifier set."""
    per_class: dict[str, set[str]] = {}
    for rec in manifest.records:
        per_class.setdefault(rec.label, set()).add(rec.patient_id)
    if min(len(p) for p in per_class.values()) < 2:
        log.warning("train: too few patients for an internal holdout; "
                    "training on all slides")
        return {r.wsi_id for r in manifest.records}, set()
    split = stratified_patient_split(
        manifest, (train_fraction, 1.0 - train_fraction, 0.0, 0.0), seed)
    return set(split.wsis_in("cnn_train")), set(split.wsis_in("cnn_val"))


def _run_train(ctx: PipelineContext) -> None:
    cfg = ctx.config
    layout = ctx.layout
    manifest = _load_cohort(ctx)
    split = load_split(layout.split_path)
    vectors = {v.wsi_id: v for v in load_features(layout.features_path)}
    xgb_wsis = split.wsis_in("xgb_set")
    missing = [w for w in xgb_wsis if w not in vectors]
    if missing:
        raise StageInputError(
            f"train: no feature vectors for {missing}; re-run features")

    subset = CohortManifest(SUBTYPING, tuple(
        r for r in manifest.records if r.wsi_id in set(xgb_wsis)))
    seed = ctx.stage_seed("train")
    train_wsis, val_wsis = _internal_split(subset, cfg.xgb_internal_train,
                                           seed)
    X, _, y = build_feature_matrix([vectors[w] for w in sorted(train_wsis)],
                                   cfg.features_fractions)
    model = gbdt_train(X, y, TrainConfig(
        n_rounds=cfg.gbdt_n_rounds, learning_rate=cfg.gbdt_learning_rate,
        reg_lambda=cfg.gbdt_reg_lambda, gamma=cfg.gbdt_gamma,
        max_depth=cfg.gbdt_max_depth,
        min_child_weight=cfg.gbdt_min_child_weight, seed=seed),
        classes=CLASS_ORDER)
    serialize(model, layout.model_path)
    log.info("train: %d rounds on %d slides", cfg.gbdt_n_rounds, len(X))
    if val_wsis:
        Xv, _, yv = build_feature_matrix(
            [vectors[w] for w in sorted(val_wsis)], cfg.features_fractions)
        accuracy = float(np.mean(
            [p == t for p, t in zip(gbdt_predict(model, Xv), yv)]))
        log.info("train: internal validation accuracy %.3f over %d slides",
                 accuracy, len(yv))


def _run_predict(ctx: PipelineContext) -> None:
    layout = ctx.layout
    split = load_split(layout.split_path)
    vectors = {v.wsi_id: v for v in load_features(layout.features_path)}
    test_wsis = split.wsis_in("test")
    missing = [w for w in test_wsis if w not in vectors]
    if missing:
        raise StageInputError(
            f"predict: no feature vectors for {missing}; re-run features")
    model = deserialize(layout.model_path)
    ordered = [vectors[w] for w in sorted(test_wsis)]
    X, ids, _ = build_feature_matrix(ordered, ctx.config.features_fractions)
    proba = predict_proba(model, X)
    predicted = gbdt_predict(model, X)
    lines = [PREDICTION_HEADER]
    for i, wsi_id in enumerate(ids):
        label = vectors[wsi_id].label or ""
        probs = ",".join(f"{p:.17g}" for p in proba[i])
        lines.append(f"{wsi_id},{label},{predicted[i]},{probs}")
    layout.predictions_path.write_text("\n".join(lines) + "\n",
                                       encoding="utf-8")
    log.info("predict: %d slides", len(ids))


@dataclass(frozen=True)
class PredictionRow:
    wsi_id: str
    label: str
    predicted: str
    proba: tuple[float, ...]


def load_predictions(path: str | Path) -> list[PredictionRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != PREDICTION_HEADER:
        raise ValidationError(
            f"predictions must start with {PREDICTION_HEADER!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 + len(CLASS_ORDER):
            raise ValidationError(
                f"predictions row {lineno}: expected "
                f"{3 + len(CLASS_ORDER)} fields")
        try:
            proba = tuple(float(p) for p in parts[3:])
        except ValueError:
            raise ValidationError(
                f"predictions row {lineno}: non-numeric probability") \
                from None
        rows.append(PredictionRow(parts[0], parts[1], parts[2], proba))
    if not rows:
        raise ValidationError("predictions file has no rows")
    return rows


def _report_rows(ctx: PipelineContext, rows: Sequence[PredictionRow]
                 ) -> list[dict]:
    """Point estimates and bootstrap intervals for every report cell."""
    cfg = ctx.config
    seed = ctx.stage_seed("evaluate")
    class_index = {cls: k for k, cls in enumerate(CLASS_ORDER)}

    def cm_of(records):
        return confusion_matrix([r.predicted for r in records],
                                [r.label for r in records], CLASS_ORDER)

    def metric_fn(row_name: str, metric: str):
        if row_name == "macro":
            if metric == "auprc":
                return lambda recs: float(np.mean([
                    average_precision(
                        [r.proba[class_index[c]] for r in recs],
                        [1 if r.label == c else 0 for r in recs])
                    for c in CLASS_ORDER]))
            if metric == "specificity":
                return lambda recs: float(np.mean([
                    class_metrics(cm_of(recs), c).specificity
                    for c in CLASS_ORDER]))
            return lambda recs: getattr(macro_metrics(cm_of(recs)), metric)
        if metric == "auprc":
            k = class_index[row_name]
            return lambda recs: average_precision(
                [r.proba[k] for r in recs],
                [1 if r.label == row_name else 0 for r in recs])
        return lambda recs: getattr(class_metrics(cm_of(recs), row_name),
                                    metric)

    truth_counts = {cls: sum(1 for r in rows if r.label == cls)
                    for cls in CLASS_ORDER}
    out = []
    for row_name in list(CLASS_ORDER) + ["macro"]:
        n = len(rows) if row_name == "macro" else truth_counts[row_name]
        cells = {}
        for metric in REPORT_METRICS:
            fn = metric_fn(row_name, metric)
            try:
                ci = bootstrap_ci(fn, rows, cfg.bootstrap_n_resamples,
                                  cfg.bootstrap_level,
                                  derive_seed(seed, "ci", row_name, metric))
                cells[metric] = (ci.point, ci.lower, ci.upper)
            except HistotypeError as exc:
                log.warning("evaluate: %s %s undefined: %s", row_name,
                            metric, exc)
                cells[metric] = None
        out.append({"row": row_name, "n": n, "cells": cells})
    return out


def _run_evaluate(ctx: PipelineContext) -> None:
    layout = ctx.layout
    rows = load_predictions(layout.predictions_path)
    if any(not r.label for r in rows):
        raise ValidationError("evaluate needs labeled predictions")
    report = _report_rows(ctx, rows)
    overall = float(np.mean([r.predicted == r.label for r in rows]))
    correct = sum(r.predicted == r.label for r in rows)

    layout.report_csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_lines = [REPORT_HEADER]
    for entry in report:
        fields = [entry["row"], str(entry["n"])]
        for metric in REPORT_METRICS:
            cell = entry["cells"][metric]
            if cell is None:
                fields += ["", "", ""]
            else:
                fields += [f"{v:.6f}" for v in cell]
        csv_lines.append(",".join(fields))
    layout.report_csv_path.write_text("\n".join(csv_lines) + "\n",
                                      encoding="utf-8")

    level = f"{ctx.config.bootstrap_level:.0%}"
    txt = [f"subtype report over {len(rows)} slides "
           f"({level} bootstrap intervals, "
           f"{ctx.config.bootstrap_n_resamples} resamples)", ""]
    header = f"{'row':<8} {'n':>4}  " + "  ".join(
        f"{m:<21}" for m in REPORT_METRICS)
    txt.append(header)
    for entry in report:
        parts = [f"{entry['row']:<8} {entry['n']:>4}"]
        for metric in REPORT_METRICS:
            cell = entry["cells"][metric]
            if cell is None:
                parts.append(f"{'n/a':<21}")
            else:
                point, lo, hi = cell
                parts.append(f"{point:.3f} [{lo:.3f},{hi:.3f}]  ")
        txt.append(" ".join(parts))
    txt.append("")
    txt.append(f"overall accuracy: {overall:.3f} ({correct}/{len(rows)})")
    txt.append("macro accuracy equals the macro sensitivity row above "
               "(unweighted mean of per-class sensitivities)")
    layout.report_txt_path.write_text("\n".join(txt) + "\n",
                                      encoding="utf-8")
    log.info("evaluate: overall accuracy %.3f", overall)


def _run_heatmap(ctx: PipelineContext) -> None:
    cfg = ctx.config
    layout = ctx.layout
    manifest = _load_cohort(ctx)
    by_id = manifest.by_wsi()
    split = load_split(layout.split_path)
    grouped = _records_by_wsi(load_tile_manifest(layout.tile_manifest))
    table = load_scores(layout.tumor_scores_path, cfg.strict_pairs)
    layout.heatmaps_dir.mkdir(parents=True, exist_ok=True)
    for wsi_id in split.wsis_in("test"):
        records = tuple(grouped.get(wsi_id, ()))
        base = _downsample_image(_working_slide(ctx, by_id[wsi_id]),
                                 cfg.heatmap_downsample)
        scores = {t.tile_id: table.target_score(t.tile_id, TUMOR_CLASSIFIER)
                  for t in records}
        tiles = scored_from_records(records, scores)
        rendered = stitch_heatmap(HeatmapSpec(
            base, tiles, cfg.tile_size, cfg.heatmap_downsample,
            cfg.heatmap_opacity))
        save_image(rendered.pixels, layout.heatmaps_dir / f"{wsi_id}.png")
        save_sidecar(tiles, layout.heatmaps_dir / f"{wsi_id}.csv")
        log.info("heatmap: %s rendered from %d tiles", wsi_id, len(tiles))


# --- stage inputs/outputs ---------------------------------------------------

def _slide_image_paths(ctx: PipelineContext) -> list[Path]:
    try:
        manifest = _load_cohort(ctx)
    except ValidationError:
        return []
    return [_slide_path(ctx, r.image_path) for r in manifest.records]


def _tile_image_paths(ctx: PipelineContext) -> list[Path]:
    try:
        records = load_tile_manifest(ctx.layout.tile_manifest)
    except (ValidationError, OSError):
        return []
    return [ctx.layout.tile_image(t) for t in records]


def _normalized_image_paths(ctx: PipelineContext) -> list[Path]:
    try:
        rows = load_normalized_manifest(ctx.layout.normalized_manifest)
    except (ValidationError, OSError):
        return []
    return [ctx.layout.root / r.path for r in rows]


def _truth_paths(ctx: PipelineContext) -> list[Path]:
    cfg = ctx.config
    if cfg.scorer_command or cfg.scorer_truth_dir is None:
        return []
    return sorted(cfg.scorer_truth_dir.glob("*_categories.png"))


def _existing(paths) -> list[Path]:
    return [p for p in paths if Path(p).is_file()]


@dataclass(frozen=True)
class StageDef:
    name: str
    inputs: Callable[[PipelineContext], list[Path]]
    outputs: Callable[[PipelineContext], list[Path]]
    run: Callable[[PipelineContext], None]


def _tile_outputs(ctx):
    return [ctx.layout.tile_manifest] + _tile_image_paths(ctx)


def _normalize_outputs(ctx):
    return [ctx.layout.normalized_manifest] + _normalized_image_paths(ctx)


def _heatmap_outputs(ctx):
    return sorted(ctx.layout.heatmaps_dir.glob("*")) \
        if ctx.layout.heatmaps_dir.is_dir() else []


STAGE_DEFS: dict[str, StageDef] = {
    "tile": StageDef(
        "tile",
        lambda ctx: [ctx.config.manifest] + _slide_image_paths(ctx),
        _tile_outputs,
        _run_tile),
    "split": StageDef(
        "split",
        lambda ctx: [ctx.config.manifest],
        lambda ctx: [ctx.layout.split_path],
        _run_split),
    "build-ref": StageDef(
        "build-ref",
        lambda ctx: [ctx.config.manifest, ctx.layout.tile_manifest,
                     ctx.layout.split_path] + _tile_image_paths(ctx)
        + _truth_paths(ctx),
        lambda ctx: [ctx.layout.tumor_scores_path, ctx.layout.mosaic_path,
                     ctx.layout.profile_path, ctx.layout.mosaic_cells_path],
        _run_build_ref),
    "normalize": StageDef(
        "normalize",
        lambda ctx: [ctx.config.manifest, ctx.layout.tile_manifest,
                     ctx.layout.split_path, ctx.layout.tumor_scores_path,
                     ctx.layout.profile_path] + _tile_image_paths(ctx),
        _normalize_outputs,
        _run_normalize),
    "score": StageDef(
        "score",
        lambda ctx: [ctx.config.manifest, ctx.layout.tile_manifest,
                     ctx.layout.normalized_manifest]
        + _normalized_image_paths(ctx) + _truth_paths(ctx),
        lambda ctx: [ctx.layout.subtype_scores_path],
        _run_score),
    "threshold": StageDef(
        "threshold",
        lambda ctx: [ctx.config.manifest, ctx.layout.split_path,
                     ctx.layout.normalized_manifest,
                     ctx.layout.subtype_scores_path],
        lambda ctx: [ctx.layout.thresholds_path],
        _run_threshold),
    "features": StageDef(
        "features",
        lambda ctx: [ctx.config.manifest, ctx.layout.split_path,
                     ctx.layout.normalized_manifest,
                     ctx.layout.subtype_scores_path,
                     ctx.layout.thresholds_path],
        lambda ctx: [ctx.layout.features_path],
        _run_features),
    "train": StageDef(
        "train",
        lambda ctx: [ctx.config.manifest, ctx.layout.split_path,
                     ctx.layout.features_path],
        lambda ctx: [ctx.layout.model_path],
        _run_train),
    "predict": StageDef(
        "predict",
        lambda ctx: [ctx.layout.split_path, ctx.layout.features_path,
                     ctx.layout.model_path],
        lambda ctx: [ctx.layout.predictions_path],
        _run_predict),
    "evaluate": StageDef(
        "evaluate",
        lambda ctx: [ctx.layout.predictions_path],
        lambda ctx: [ctx.layout.report_csv_path,
                     ctx.layout.report_txt_path],
        _run_evaluate),
    "heatmap": StageDef(
        "heatmap",
        lambda ctx: [ctx.config.manifest, ctx.layout.tile_manifest,
                     ctx.layout.split_path, ctx.layout.tumor_scores_path]
        + _slide_image_paths(ctx),
        _heatmap_outputs,
        _run_heatmap),
}


# --- provenance and execution -----------------------------------------------

def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_map(paths) -> dict[str, str]:
    return {str(p): _sha256_file(Path(p)) for p in paths}


def provenance_path(layout: WorkLayout, stage: str) -> Path:
    return layout.provenance_dir / f"{stage}.json"


def _is_up_to_date(record: dict, config_hash: str,
                   current_inputs: dict[str, str]) -> bool:
    if record.get("config_hash") != config_hash:
        return False
    if record.get("inputs") != current_inputs:
        return False
    outputs = record.get("outputs", {})
    if not outputs:
        return False
    for path, digest in outputs.items():
        p = Path(path)
        if not p.is_file() or _sha256_file(p) != digest:
            return False
    return True


def run_stage(ctx: PipelineContext, stage: str, force: bool = False) -> bool:
    """Run one stage unless its provenance proves it is current.

    Returns True when the stage ran, False when it was skipped.
    """
    if stage not in STAGE_DEFS:
        raise ValidationError(
            f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    definition = STAGE_DEFS[stage]
    config_hash = stage_config_hash(stage, ctx.config_text, ctx.overrides)
    declared = definition.inputs(ctx)
    missing = [str(p) for p in declared if not Path(p).is_file()]
    current_inputs = _hash_map(_existing(declared))

    prov_file = provenance_path(ctx.layout, stage)
    if not force and not missing and prov_file.is_file():
        try:
            record = json.loads(prov_file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            record = {}
        if _is_up_to_date(record, config_hash, current_inputs):
            log.info("%s: skipped (up to date)", stage)
            return False
    if missing:
        raise StageInputError(
            f"stage {stage}: missing input(s): {', '.join(missing)}; "
            f"run the earlier stages first")

    ctx.layout.root.mkdir(parents=True, exist_ok=True)
    log.info("%s: running", stage)
    definition.run(ctx)

    record = {
        "stage": stage,
        "config_hash": config_hash,
        "seed": ctx.stage_seed(stage),
        "inputs": current_inputs,
        "outputs": _hash_map(definition.outputs(ctx)),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    ctx.layout.provenance_dir.mkdir(parents=True, exist_ok=True)
    prov_file.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return True


def run_all(ctx: PipelineContext, force: bool = False) -> dict[str, bool]:
    return {stage: run_stage(ctx, stage, force) for stage in STAGES}
