"""Deterministic synthetic cohorts with per-pixel ground truth.

Each slide is drawn from seeded streams keyed by the slide id, so a
cohort regenerates byte-identically from (seed, shape) alone. Slides are
built in the working plane (0.5 microns per pixel); half of them are
then duplicated pixel-wise to 0.25 to exercise resampling, which the
box filter inverts exactly.

Ground truth per slide: a category raster (background, normal tissue,
tumor, fold, marker) in the working plane, and the stain matrix used to
render it. The raster drives the synthetic scorer: a tile is a true
tumor tile when at least half its footprint is tumor, and a true
subtype tile when it is a tumor tile on a slide of that subtype.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from . import CLASS_ORDER
from .config import render_config
from .errors import ValidationError
from .manifest import SUBTYPING, CohortManifest, SlideRecord, save_manifest
from .rng import Xoshiro256StarStar, XoshiroLanes, derive_seed
from .tiling import TileRecord, save_image

log = logging.getLogger(__name__)

CATEGORY_BACKGROUND = 0
CATEGORY_NORMAL = 1
CATEGORY_TUMOR = 2
CATEGORY_FOLD = 3
CATEGORY_MARKER = 4

# mean (hematoxylin, eosin) concentration per tissue category
_CATEGORY_CONCENTRATIONS = {
    CATEGORY_NORMAL: (0.35, 0.45),
    CATEGORY_TUMOR: (0.75, 0.35),
    CATEGORY_FOLD: (1.10, 0.90),
}
_CONCENTRATION_JITTER = 0.12
_MARKER_COLOR = (45.0, 45.0, 150.0)
_MARKER_JITTER = 20.0

# unnormalized stain columns (hematoxylin first: greater blue weight);
# every component stays well above the OD floor so the angular extremes
# of rendered tiles are recoverable
_BASE_MATRIX = np.array([
    [0.28, 0.60],
    [0.72, 0.70],
    [0.63, 0.38],
])
_MATRIX_JITTER = 0.10
_MIN_SEPARATION_DEG = 16.0
_MIN_BLUE_GAP = 0.05

WORKING_MPP = 0.5
FINE_MPP = 0.25

STAIN_TRUTH_SUFFIX = "_stain.txt"
CATEGORY_TRUTH_SUFFIX = "_categories.png"


@dataclass(frozen=True)
class SynthConfig:
    out_dir: Path
    classes: tuple[str, ...] = CLASS_ORDER
    wsis_per_class: int = 5
    signal: float = 1.0
    seed: int = 0
    wsi_width: int = 256
    wsi_height: int = 192

    def __post_init__(self):
        if not self.classes:
            raise ValidationError("classes must be non-empty")
        unknown = sorted(set(self.classes) - set(CLASS_ORDER))
        if unknown:
            raise ValidationError(f"unknown classes {unknown}")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError("duplicate classes")
        if self.wsis_per_class < 1:
            raise ValidationError("wsis_per_class must be >= 1")
        if not 0.0 <= self.signal <= 1.0:
            raise ValidationError("signal must be in [0, 1]")
        if self.wsi_width < 64 or self.wsi_height < 64:
            raise ValidationError("slides must be at least 64x64")


@dataclass(frozen=True)
class SynthCohort:
    root: Path
    manifest_path: Path
    config_path: Path
    truth_dir: Path
    wsi_ids: tuple[str, ...]


def _ellipse(height: int, width: int, cx: float, cy: float,
             rx: float, ry: float) -> np.ndarray:
    ys, xs = np.ogrid[:height, :width]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def synthesize_categories(width: int, height: int,
                          rng: Xoshiro256StarStar) -> np.ndarray:
    """Category raster: tissue ellipse, tumor core, optional fold/marker.

    All random parameters are drawn unconditionally so the stream offset
    does not depend on which artifacts appear.
    """
    cx = width * (0.46 + 0.08 * rng.random())
    cy = height * (0.46 + 0.08 * rng.random())
    rx = width * (0.34 + 0.08 * rng.random())
    ry = height * (0.34 + 0.08 * rng.random())

    tcx = cx + (rng.random() - 0.5) * 0.4 * rx
    tcy = cy + (rng.random() - 0.5) * 0.4 * ry
    trx = rx * (0.50 + 0.15 * rng.random())
    try_ = ry * (0.50 + 0.15 * rng.random())

    fold_coin = rng.random()
    fcx = cx + (rng.random() - 0.5) * 1.2 * rx
    fcy = cy + (rng.random() - 0.5) * 1.2 * ry
    fr = 0.10 * min(rx, ry) * (1.0 + rng.random())

    marker_coin = rng.random()
    mcx = width * (0.04 + 0.06 * rng.random())
    mcy = height * (0.15 + 0.70 * rng.random())
    mr = 0.05 * min(width, height) * (1.0 + rng.random())

    categories = np.zeros((height, width), dtype=np.uint8)
    tissue = _ellipse(height, width, cx, cy, rx, ry)
    categories[tissue] = CATEGORY_NORMAL
    tumor = _ellipse(height, width, tcx, tcy, trx, try_) & tissue
    categories[tumor] = CATEGORY_TUMOR
    if fold_coin < 0.5:
        fold = _ellipse(height, width, fcx, fcy, fr, fr) & tissue
        categories[fold] = CATEGORY_FOLD
    if marker_coin < 0.5:
        marker = _ellipse(height, width, mcx, mcy, mr, mr)
        categories[marker] = CATEGORY_MARKER
    return categories


def _column_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    return math.degrees(math.acos(dot))


def jittered_stain_matrix(rng: Xoshiro256StarStar) -> np.ndarray:
    """Per-slide stain basis near the base columns, unit-normalized."""
    while True:
        jitter = np.array([[(rng.random() - 0.5) * 2 * _MATRIX_JITTER
                            for _ in range(2)] for _ in range(3)])
        m = np.clip(_BASE_MATRIX + jitter, 0.28, 0.95)
        m = m / np.linalg.norm(m, axis=0, keepdims=True)
        if _column_angle_deg(m[:, 0], m[:, 1]) < _MIN_SEPARATION_DEG:
            continue
        if m[2, 0] < m[2, 1] + _MIN_BLUE_GAP:
            continue
        return m


def render_slide(categories: np.ndarray, matrix: np.ndarray,
                 noise_seed: int, i0: float = 255.0) -> np.ndarray:
    """RGB render: concentrations by category, Beer-Lambert, marker ink."""
    height, width = categories.shape
    lanes = XoshiroLanes(noise_seed, lanes=64)
    u = lanes.random_floats(height * width * 3).reshape(height, width, 3)

    conc = np.zeros((height, width, 2), dtype=np.float64)
    for cat, (h_mean, e_mean) in _CATEGORY_CONCENTRATIONS.items():
        conc[categories == cat] = (h_mean, e_mean)
    stained = (categories != CATEGORY_BACKGROUND) \
        & (categories != CATEGORY_MARKER)
    conc += (u[:, :, :2] - 0.5) * _CONCENTRATION_JITTER * stained[:, :, None]
    conc = np.clip(conc, 0.0, None)

    od = conc @ matrix.T
    pixels = np.clip(np.rint(i0 * np.power(10.0, -od)), 0, 255) \
        .astype(np.uint8)
    pixels[~stained] = 255
    marker = categories == CATEGORY_MARKER
    if marker.any():
        ink = np.asarray(_MARKER_COLOR) \
            + (u[marker] - 0.5) * _MARKER_JITTER
        pixels[marker] = np.clip(np.rint(ink), 0, 255).astype(np.uint8)
    return pixels


def upsample_nearest_2x(pixels: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(pixels, 2, axis=0), 2, axis=1)


# config values tuned for small synthetic slides; everything else keeps
# the production defaults
def _cohort_config_text(config: SynthConfig, n_wsis: int) -> str:
    # overlap stays uniform across classes here: a class-specific overlap
    # inflates that class's tile counts, and count features would then
    # carry label information even from an uninformative scorer
    return render_config({
        "tiling.tile_size": "32",
        "tiling.overlap_her2": "0",
        "tiling.mask_downsample": "8",
        "stain.reference_wsis": str(min(n_wsis, 16)),
        "scorer.truth_dir": "truth",
        "scorer.signal": f"{config.signal:g}",
        "split.cnn_train": "0.5",
        "split.cnn_val": "0.0",
        "split.xgb": "0.25",
        "split.test": "0.25",
        "gbdt.learning_rate": "0.3",
        "gbdt.min_child_weight": "0.001",
        "bootstrap.n_resamples": "200",
        "heatmap.downsample": "4",
        "seed": str(config.seed),
    })


def generate_synthetic_cohort(config: SynthConfig) -> SynthCohort:
    """Write slides, truth, manifest, and a ready-to-run config.

    Splits in the emitted config need at least three slides per class;
    smaller cohorts still generate but cannot run the full pipeline.
    """
    root = Path(config.out_dir)
    images_dir = root / "images"
    truth_dir = root / "truth"
    images_dir.mkdir(parents=True, exist_ok=True)
    truth_dir.mkdir(parents=True, exist_ok=True)

    records = []
    wsi_ids = []
    index = 0
    for cls in config.classes:
        for i in range(config.wsis_per_class):
            wsi_id = f"{cls.lower()}{i:02d}"
            rng = Xoshiro256StarStar(
                derive_seed(config.seed, "wsi", wsi_id))
            categories = synthesize_categories(
                config.wsi_width, config.wsi_height, rng)
            matrix = jittered_stain_matrix(rng)
            pixels = render_slide(
                categories, matrix,
                derive_seed(config.seed, "noise", wsi_id))

            # odd slides ship at finer resolution to exercise resampling
            if index % 2 == 0:
                mpp = WORKING_MPP
            else:
                mpp = FINE_MPP
                pixels = upsample_nearest_2x(pixels)
            save_image(pixels, images_dir / f"{wsi_id}.png")
            save_image(categories,
                       truth_dir / f"{wsi_id}{CATEGORY_TRUTH_SUFFIX}")
            stain_lines = [" ".join(f"{v:.17g}" for v in row)
                           for row in matrix]
            (truth_dir / f"{wsi_id}{STAIN_TRUTH_SUFFIX}").write_text(
                "\n".join(stain_lines) + "\n", encoding="utf-8")

            records.append(SlideRecord(
                wsi_id=wsi_id, patient_id=f"pat_{wsi_id}", label=cls,
                image_path=f"images/{wsi_id}.png", source_mpp=mpp))
            wsi_ids.append(wsi_id)
            index += 1

    records.sort(key=lambda r: r.wsi_id)
    manifest = CohortManifest(SUBTYPING, tuple(records))
    manifest_path = root / "manifest.csv"
    save_manifest(manifest, manifest_path)

    config_path = root / "cohort.cfg"
    config_path.write_text(_cohort_config_text(config, len(records)),
                           encoding="utf-8")
    log.info("synthetic cohort: %d slides under %s", len(records), root)
    return SynthCohort(root, manifest_path, config_path, truth_dir,
                       tuple(sorted(wsi_ids)))


# --- ground truth access ----------------------------------------------------

def load_category_raster(path: str | Path) -> np.ndarray:
    pixels = np.asarray(Image.open(path))
    if pixels.ndim != 2:
        raise ValidationError(f"category raster {path} must be grayscale")
    if pixels.max(initial=0) > CATEGORY_MARKER:
        raise ValidationError(f"category raster {path} has unknown codes")
    return pixels


def category_truth_path(truth_dir: str | Path, wsi_id: str) -> Path:
    return Path(truth_dir) / f"{wsi_id}{CATEGORY_TRUTH_SUFFIX}"


def tumor_positive_tiles(categories: np.ndarray,
                         records: Iterable[TileRecord],
                         tile_size: int,
                         min_fraction: float = 0.5) -> set[str]:
    """Tile ids whose footprint is at least min_fraction tumor."""
    height, width = categories.shape
    positive = set()
    for rec in records:
        if rec.x < 0 or rec.y < 0 or rec.x + tile_size > width \
                or rec.y + tile_size > height:
            raise ValidationError(
                f"tile {rec.tile_id} exceeds the {width}x{height} "
                f"category raster")
        window = categories[rec.y:rec.y + tile_size,
                            rec.x:rec.x + tile_size]
        if np.mean(window == CATEGORY_TUMOR) >= min_fraction:
            positive.add(rec.tile_id)
    return positive
