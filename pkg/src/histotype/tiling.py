"""Slide raster handling: resampling, tissue detection, tile planning.

Tile geometry: origins step by stride = tile_size - overlap from 0; a tile
is kept only when it fits entirely inside the image (partial edge tiles are
dropped, never padded), so the origin count per axis is
floor((dim - tile_size) / stride) + 1 when dim >= tile_size, else 0.

Tissue detection runs on a downsampled raster: HSV saturation, a global
threshold (Otsu over a 256-bin histogram by default, or a fixed cut), then
one pass of 3x3 binary closing. Borders count as background for the
dilation half and as foreground for the erosion half, so closing never
eats mask borders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .errors import ManifestError, PipelineError, ValidationError

log = logging.getLogger("histotype.tiling")

TILE_MANIFEST_HEADER = "tile_id,wsi_id,x,y,tissue_fraction"


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray  # (height, width, 3) uint8 RGB
    mpp: float

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValidationError("raster must be (height, width, 3)")
        if self.pixels.dtype != np.uint8:
            raise ValidationError("raster must be 8-bit")
        if not self.mpp > 0:
            raise ValidationError("mpp must be positive")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class TissueParams:
    use_otsu: bool = True
    saturation_threshold: float = 0.08  # used when use_otsu is False


@dataclass(frozen=True)
class TissueMask:
    mask: np.ndarray  # bool, (ceil(h/d), ceil(w/d))
    downsample: int


@dataclass(frozen=True)
class TileRecord:
    tile_id: str
    wsi_id: str
    x: int
    y: int
    tissue_fraction: float


@dataclass(frozen=True)
class TileGrid:
    tile_size: int
    stride: int
    min_tissue_fraction: float
    records: tuple[TileRecord, ...]  # row-major over kept origins

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r.x, r.y) for r in self.records]


# --- image IO (pluggable by suffix) ----------------------------------------

def _pillow_reader(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


READERS: dict[str, Callable[[Path], np.ndarray]] = {
    ".png": _pillow_reader,
    ".tif": _pillow_reader,
    ".tiff": _pillow_reader,
}


def register_reader(suffix: str, reader: Callable[[Path], np.ndarray]) -> None:
    READERS[suffix.lower()] = reader


def load_image(path: str | Path, mpp: float) -> RasterImage:
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"image not found: {path}")
    reader = READERS.get(path.suffix.lower())
    if reader is None:
        raise ValidationError(f"no reader registered for {path.suffix!r}")
    return RasterImage(np.ascontiguousarray(reader(path)), mpp)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(pixels).save(Path(path), format="PNG")


# --- resampling -------------------------------------------------------------

def resample_to_target_mpp(image: RasterImage, target_mpp: float) -> RasterImage:
    """Area-average downsample to the working resolution.

    Upsampling is refused: a source coarser than the target has no real
    detail to invent. Equal resolutions return the pixels unchanged.
    """
    if target_mpp < image.mpp:
        raise ValidationError(
            f"source at {image.mpp} mpp is coarser than target {target_mpp} mpp"
        )
    if target_mpp == image.mpp:
        return RasterImage(image.pixels.copy(), target_mpp)
    scale = image.mpp / target_mpp
    new_w = int(image.width * scale)
    new_h = int(image.height * scale)
    if new_w < 1 or new_h < 1:
        raise ValidationError("image smaller than one pixel at target mpp")
    resized = Image.fromarray(image.pixels).resize((new_w, new_h), Image.BOX)
    return RasterImage(np.asarray(resized), target_mpp)


# --- tissue detection -------------------------------------------------------

def saturation_channel(pixels: np.ndarray) -> np.ndarray:
    """HSV saturation in [0, 1]: (max - min) / max, zero for black pixels."""
    rgb = pixels.astype(np.float64)
    cmax = rgb.max(axis=2)
    cmin = rgb.min(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(cmax > 0, (cmax - cmin) / np.maximum(cmax, 1e-12), 0.0)
    return sat


def otsu_threshold(histogram: np.ndarray) -> int:
    """Bin index maximizing between-class variance; foreground is value > bin.

    A histogram with all mass in one bin has zero variance everywhere; the
    scan then returns bin 0, which classifies a constant-zero channel as all
    background and any constant positive channel as all foreground.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    total = hist.sum()
    if total == 0:
        return 0
    bins = np.arange(hist.size, dtype=np.float64)
    weight_bg = np.cumsum(hist)
    mass_bg = np.cumsum(hist * bins)
    mean_total = mass_bg[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        variance = (mean_total * weight_bg - total * mass_bg) ** 2 / (
            weight_bg * (total - weight_bg)
        )
    variance = np.nan_to_num(variance, nan=0.0, posinf=0.0)
    return int(np.argmax(variance))


def _dilate3(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=False)
    out = np.zeros_like(mask)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out


def _erode3(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1, constant_values=True)
    out = np.ones_like(mask)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out &= padded[dy : dy + mask.shape[0], dx : dx + mask.shape[1]]
    return out


def detect_tissue(
    image: RasterImage,
    downsample: int = 16,
    params: TissueParams = TissueParams(),
) -> TissueMask:
    if downsample < 1 or int(downsample) != downsample:
        raise ValidationError(f"downsample must be a positive integer")
    mask_w = -(-image.width // downsample)
    mask_h = -(-image.height // downsample)
    if downsample == 1:
        small = image.pixels
    else:
        small = np.asarray(
            Image.fromarray(image.pixels).resize((mask_w, mask_h), Image.BOX)
        )
    sat = saturation_channel(small)
    if params.use_otsu:
        sat_bytes = np.clip(np.round(sat * 255.0), 0, 255).astype(np.uint8)
        hist = np.bincount(sat_bytes.ravel(), minlength=256)
        cut = otsu_threshold(hist)
        mask = sat_bytes > cut
    else:
        mask = sat > params.saturation_threshold
    mask = _erode3(_dilate3(mask))
    return TissueMask(mask, int(downsample))


# --- tile planning ----------------------------------------------------------

def axis_origins(dim: int, tile_size: int, stride: int) -> list[int]:
    if dim < tile_size:
        return []
    return list(range(0, dim - tile_size + 1, stride))


def plan_tiles(
    width: int,
    height: int,
    tile_size: int,
    overlap: int,
    mask: TissueMask,
    min_tissue_fraction: float = 0.5,
    wsi_id: str = "wsi",
) -> TileGrid:
    """Row-major grid of fully-contained tiles, filtered by tissue fraction.

    The tissue fraction of a tile is the mean of the mask over the tile's
    footprint mapped onto the mask raster (downsample-aligned, boundary
    cells included).
    """
    if tile_size <= 0:
        raise ValidationError("tile_size must be positive")
    if not 0 <= overlap < tile_size:
        raise ValidationError(
            f"overlap {overlap} must satisfy 0 <= overlap < tile_size {tile_size}"
        )
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ValidationError("min_tissue_fraction must be within [0, 1]")
    stride = tile_size - overlap
    xs = axis_origins(width, tile_size, stride)
    ys = axis_origins(height, tile_size, stride)
    if not xs or not ys:
        log.warning("%s: tile size %d exceeds image %dx%d, empty grid",
                    wsi_id, tile_size, width, height)
        return TileGrid(tile_size, stride, min_tissue_fraction, ())

    d = mask.downsample
    m = mask.mask.astype(np.int64)
    integral = np.zeros((m.shape[0] + 1, m.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = m.cumsum(axis=0).cumsum(axis=1)

    records = []
    for y in ys:
        my0, my1 = y // d, min(-(-(y + tile_size) // d), m.shape[0])
        for x in xs:
            mx0, mx1 = x // d, min(-(-(x + tile_size) // d), m.shape[1])
            area = (my1 - my0) * (mx1 - mx0)
            hits = int(integral[my1, mx1] - integral[my0, mx1]
                       - integral[my1, mx0] + integral[my0, mx0])
            fraction = hits / area if area > 0 else 0.0
            if fraction >= min_tissue_fraction:
                records.append(TileRecord(
                    tile_id=f"{wsi_id}_{x:06d}_{y:06d}",
                    wsi_id=wsi_id, x=x, y=y, tissue_fraction=fraction))
    return TileGrid(tile_size, stride, min_tissue_fraction, tuple(records))


def extract_tile(image: RasterImage, x: int, y: int, tile_size: int) -> np.ndarray:
    if x < 0 or y < 0 or x + tile_size > image.width or y + tile_size > image.height:
        raise ValidationError(
            f"tile at ({x}, {y}) size {tile_size} exceeds "
            f"{image.width}x{image.height}"
        )
    return image.pixels[y : y + tile_size, x : x + tile_size].copy()


# --- tile manifest IO -------------------------------------------------------

def save_tile_manifest(records, path: str | Path) -> None:
    rows = [TILE_MANIFEST_HEADER]
    for r in records:
        rows.append(f"{r.tile_id},{r.wsi_id},{r.x},{r.y},{r.tissue_fraction:.17g}")
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_tile_manifest(path: str | Path) -> list[TileRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != TILE_MANIFEST_HEADER:
        raise ManifestError(
            f"tile manifest must start with header {TILE_MANIFEST_HEADER!r}"
        )
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ManifestError(f"tile row {lineno}: expected 5 fields")
        tile_id = parts[0].strip()
        if tile_id in seen:
            raise ManifestError(f"tile row {lineno}: duplicate tile_id {tile_id!r}")
        seen.add(tile_id)
        try:
            records.append(TileRecord(tile_id, parts[1].strip(),
                                      int(parts[2]), int(parts[3]),
                                      float(parts[4])))
        except ValueError:
            raise ManifestError(f"tile row {lineno}: bad numeric field") from None
    return records
