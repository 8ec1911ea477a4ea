"""Stain estimation and color normalization for H&E tiles.

Optical density: OD = -log10(clamp(I, 1, I0) / I0) per channel, with the
white point I0 defaulting to 255. A stain profile is a 3x2 matrix of unit
OD-space stain vectors (column 0 is the stain with the greater blue-channel
weight, so serialization is stable) plus the 99th-percentile concentration
per stain.

Estimation follows the plane-fitting recipe: drop pixels with any channel
below beta, take the top-2 eigenvectors of the 3x3 OD covariance, project,
and read the stain directions off the alpha / (100 - alpha) percentiles of
the projected polar angle. Angles are re-centered on their circular mean
before taking percentiles so the eigenvector sign convention can never wrap
the distribution across the atan2 branch cut.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import DegenerateInputError, ValidationError
from .rng import Xoshiro256StarStar, derive_seed

log = logging.getLogger("histotype.stain")

DEFAULT_I0 = 255.0
DEFAULT_BETA = 0.15
DEFAULT_ALPHA = 1.0

PROFILE_HEADER = "stain-profile v1"


def rgb_to_od(pixels: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Optical density of an RGB array; shape is preserved, dtype float64."""
    if not i0 > 1:
        raise ValidationError("white point I0 must exceed 1")
    values = np.clip(np.asarray(pixels, dtype=np.float64), 1.0, i0)
    return -np.log10(values / i0)


def od_to_rgb(od: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Inverse transform with clipping into [0, I0] and 8-bit rounding."""
    intensity = i0 * np.power(10.0, -np.asarray(od, dtype=np.float64))
    return np.clip(np.rint(intensity), 0, i0).astype(np.uint8)


@dataclass(frozen=True)
class StainProfile:
    matrix: np.ndarray             # (3, 2), unit columns, H-like column first
    max_concentrations: np.ndarray  # (2,), 99th percentile per stain

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if m.shape != (3, 2) or c.shape != (2,):
            raise ValidationError("profile needs a 3x2 matrix and 2 maxima")
        norms = np.linalg.norm(m, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValidationError("stain columns must have unit norm")
        if self.column_angle_degrees(m) <= 1.0:
            raise DegenerateInputError("stain columns are near-parallel")
        if np.any(c <= 0):
            raise DegenerateInputError("max concentrations must be positive")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "max_concentrations", c)

    @staticmethod
    def column_angle_degrees(matrix: np.ndarray) -> float:
        cos = float(np.clip(np.dot(matrix[:, 0], matrix[:, 1]), -1.0, 1.0))
        return math.degrees(math.acos(cos))


def order_columns_blue_first(columns: np.ndarray) -> np.ndarray:
    """Stable column order: greater blue-channel weight first (ties: red)."""
    a, b = columns[:, 0], columns[:, 1]
    if (a[2], a[0]) >= (b[2], b[0]):
        return np.column_stack([a, b])
    return np.column_stack([b, a])


def estimate_stain_profile(
    od: np.ndarray,
    beta: float = DEFAULT_BETA,
    alpha: float = DEFAULT_ALPHA,
) -> StainProfile:
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    if od.shape[0] < 2:
        raise DegenerateInputError("need at least 2 pixels")
    retained = od[np.all(od >= beta, axis=1)]
    if retained.shape[0] < 2:
        raise DegenerateInputError(
            f"only {retained.shape[0]} pixels above beta={beta}; blank tile?"
        )
    eigvals, eigvecs = np.linalg.eigh(np.cov(retained.T))
    if eigvals[2] <= 1e-12 or eigvals[1] <= 1e-8 * eigvals[2]:
        raise DegenerateInputError("OD covariance is rank-deficient "
                                   "(single stain or constant tile)")
    plane = eigvecs[:, 1:3]  # top-2 eigenvectors, ascending order
    projected = retained @ plane
    phi = np.arctan2(projected[:, 1], projected[:, 0])
    center = math.atan2(float(np.mean(np.sin(phi))), float(np.mean(np.cos(phi))))
    offset = np.angle(np.exp(1j * (phi - center)))
    lo = center + float(np.percentile(offset, alpha))
    hi = center + float(np.percentile(offset, 100.0 - alpha))
    columns = []
    for angle in (lo, hi):
        v = plane @ np.array([math.cos(angle), math.sin(angle)])
        v /= np.linalg.norm(v)
        if v.sum() < 0:
            v = -v
        columns.append(v)
    matrix = order_columns_blue_first(np.column_stack(columns))
    concentrations = compute_concentrations(od, matrix)
    max_c = np.percentile(concentrations, 99.0, axis=0)
    return StainProfile(matrix, max_c)


def compute_concentrations(od: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Per-pixel least-squares stain concentrations, negatives clamped to 0.

    Accepts (..., 3) OD arrays and returns (..., 2) with leading shape kept.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 2):
        raise ValidationError("stain matrix must be 3x2")
    singulars = np.linalg.svd(matrix, compute_uv=False)
    if singulars[1] <= 1e-10 * singulars[0]:
        raise ValidationError("singular stain matrix")
    od = np.asarray(od, dtype=np.float64)
    lead = od.shape[:-1]
    flat = od.reshape(-1, 3)
    solution, *_ = np.linalg.lstsq(matrix, flat.T, rcond=None)
    return np.clip(solution.T, 0.0, None).reshape(*lead, 2)


def normalize_tile(
    tile: np.ndarray,
    source: StainProfile,
    reference: StainProfile,
    i0: float = DEFAULT_I0,
) -> np.ndarray:
    """Re-express a tile in the reference stain basis.

    Concentrations are computed against the source profile, rescaled so the
    source maxima line up with the reference maxima, then reconstructed
    through the reference matrix.
    """
    od = rgb_to_od(tile, i0)
    concentrations = compute_concentrations(od, source.matrix)
    scale = reference.max_concentrations / source.max_concentrations
    od_hat = (concentrations * scale) @ reference.matrix.T
    return od_to_rgb(od_hat, i0)


# --- serialization ----------------------------------------------------------

def serialize_profile(profile: StainProfile) -> str:
    lines = [PROFILE_HEADER]
    for row in profile.matrix:
        lines.append(f"{row[0]:.17g} {row[1]:.17g}")
    maxima = profile.max_concentrations
    lines.append(f"{maxima[0]:.17g} {maxima[1]:.17g}")
    return "\n".join(lines) + "\n"


def parse_profile(text: str) -> StainProfile:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 5 or lines[0].strip() != PROFILE_HEADER:
        raise ValidationError("not a stain profile record")
    try:
        rows = [[float(tok) for tok in ln.split()] for ln in lines[1:]]
    except ValueError:
        raise ValidationError("stain profile has non-numeric entries") from None
    if any(len(row) != 2 for row in rows):
        raise ValidationError("stain profile rows must have 2 entries")
    return StainProfile(np.array(rows[:3]), np.array(rows[3]))


def save_profile(profile: StainProfile, path: str | Path) -> None:
    Path(path).write_text(serialize_profile(profile), encoding="utf-8")


def load_profile(path: str | Path) -> StainProfile:
    return parse_profile(Path(path).read_text(encoding="utf-8"))


# --- reference mosaic -------------------------------------------------------

@dataclass(frozen=True)
class ReferenceMosaic:
    image: np.ndarray  # uint8 RGB mosaic
    profile: StainProfile
    provenance: tuple[tuple[str, str], ...]  # (wsi_id, tile_id) per cell


def build_reference_mosaic(
    tile_paths_by_wsi: Mapping[str, Sequence[str | Path]],
    n_wsis: int = 256,
    seed: int = 0,
    i0: float = DEFAULT_I0,
    beta: float = DEFAULT_BETA,
    alpha: float = DEFAULT_ALPHA,
) -> ReferenceMosaic:
    """One random tile from each of n distinct WSIs, assembled row-major.

    Cohorts smaller than n use every eligible WSI (with a warning). The
    grid is 16x16 when exactly 256 tiles are drawn, otherwise the squarest
    grid that fits; unused cells stay white.
    """
    eligible = sorted(w for w, paths in tile_paths_by_wsi.items() if paths)
    if not eligible:
        raise ValidationError("no WSIs with tiles available for the mosaic")
    if len(eligible) < len(tile_paths_by_wsi):
        log.warning("%d WSIs have no tiles and were skipped",
                    len(tile_paths_by_wsi) - len(eligible))
    if len(eligible) < n_wsis:
        log.warning("only %d WSIs available for a %d-tile mosaic; using all",
                    len(eligible), n_wsis)
        chosen = eligible
    else:
        rng = Xoshiro256StarStar(derive_seed(seed, "mosaic-wsis"))
        chosen = sorted(rng.sample(eligible, n_wsis))

    cells = []
    provenance = []
    tile_size = None
    for wsi_id in chosen:
        paths = list(tile_paths_by_wsi[wsi_id])
        rng = Xoshiro256StarStar(derive_seed(seed, "mosaic-tile", wsi_id))
        path = Path(paths[rng.next_below(len(paths))])
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"))
        if pixels.shape[0] != pixels.shape[1]:
            raise ValidationError(f"mosaic tile {path.name} is not square")
        if tile_size is None:
            tile_size = pixels.shape[0]
        elif pixels.shape[0] != tile_size:
            raise ValidationError("mosaic tiles must share one size")
        cells.append(pixels)
        provenance.append((wsi_id, path.stem))

    n = len(cells)
    cols = 16 if n == 256 else max(1, math.ceil(math.sqrt(n)))
    rows = math.ceil(n / cols)
    canvas = np.full((rows * tile_size, cols * tile_size, 3),
                     int(round(i0)) if i0 <= 255 else 255, dtype=np.uint8)
    for idx, cell in enumerate(cells):
        r, c = divmod(idx, cols)
        canvas[r * tile_size : (r + 1) * tile_size,
               c * tile_size : (c + 1) * tile_size] = cell
    profile = estimate_stain_profile(rgb_to_od(canvas, i0), beta, alpha)
    return ReferenceMosaic(canvas, profile, tuple(provenance))


# --- estimator wrapper ------------------------------------------------------

class MacenkoNormalizer(TransformerMixin, BaseEstimator):
    """Transformer view of the normalizer: fit on a reference image, then
    transform tiles onto its stain basis.

    transform accepts one (H, W, 3) uint8 tile or a sequence of tiles and
    returns the same structure. Each tile is normalized against its own
    estimated profile, so tiles from different slides land on a common
    appearance.
    """

    def __init__(self, i0: float = DEFAULT_I0, beta: float = DEFAULT_BETA,
                 alpha: float = DEFAULT_ALPHA):
        self.i0 = i0
        self.beta = beta
        self.alpha = alpha

    def fit(self, X, y=None):
        self.reference_profile_ = estimate_stain_profile(
            rgb_to_od(X, self.i0), self.beta, self.alpha)
        return self

    def transform(self, X):
        if not hasattr(self, "reference_profile_"):
            raise NotFittedError("fit the normalizer on a reference first")
        single = isinstance(X, np.ndarray) and X.ndim == 3
        tiles = [X] if single else list(X)
        out = []
        for tile in tiles:
            source = estimate_stain_profile(
                rgb_to_od(tile, self.i0), self.beta, self.alpha)
            out.append(normalize_tile(tile, source, self.reference_profile_,
                                      self.i0))
        return out[0] if single else out
