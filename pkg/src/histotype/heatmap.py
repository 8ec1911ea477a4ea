"""Score overlay rendering: stitch per-tile scores onto a downsampled WSI.

Each tile footprint is tinted with a color ramp evaluated at its score
and alpha-blended over the base image. Overlapping tiles contribute the
arithmetic mean of their tints before the single blend, so rendering
order cannot matter. Pixels no tile covers stay bit-identical to the
base.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import PipelineError, StageInputError, ValidationError
from .tiling import RasterImage, TileRecord

log = logging.getLogger("histotype.heatmap")

HEATMAP_SIDECAR_HEADER = "tile_id,score"

RampFn = Callable[[float], tuple[int, int, int]]


def default_ramp(score: float) -> tuple[int, int, int]:
    """Piecewise-linear green (0) -> yellow (0.5) -> red (1)."""
    s = min(1.0, max(0.0, float(score)))
    if s <= 0.5:
        return (int(round(510.0 * s)), 255, 0)
    return (255, int(round(510.0 * (1.0 - s))), 0)


@dataclass(frozen=True)
class ScoredTile:
    tile_id: str
    x: int
    y: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(
                f"tile {self.tile_id}: score outside [0, 1]")


def scored_from_records(records: Sequence[TileRecord],
                        scores: Mapping[str, float]) -> tuple[ScoredTile, ...]:
    out = []
    for record in records:
        if record.tile_id not in scores:
            raise StageInputError(
                f"no heatmap score for tile {record.tile_id}")
        out.append(ScoredTile(record.tile_id, record.x, record.y,
                              float(scores[record.tile_id])))
    return tuple(out)


@dataclass(frozen=True)
class HeatmapSpec:
    base: RasterImage           # already downsampled to heatmap resolution
    tiles: tuple[ScoredTile, ...]
    tile_size: int
    downsample: int
    opacity: float = 0.4
    ramp: RampFn = field(default=default_ramp)

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError("opacity must be in [0, 1]")
        if self.tile_size < 1 or self.downsample < 1:
            raise ValidationError("tile_size and downsample must be >= 1")


def stitch_heatmap(spec: HeatmapSpec) -> RasterImage:
    base = spec.base.pixels
    height, width = base.shape[:2]
    tint_sum = np.zeros((height, width, 3), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.int64)
    d = spec.downsample
    for tile in spec.tiles:
        x0, y0 = tile.x // d, tile.y // d
        x1 = math.ceil((tile.x + spec.tile_size) / d)
        y1 = math.ceil((tile.y + spec.tile_size) / d)
        if tile.x < 0 or tile.y < 0 or x1 > width or y1 > height:
            raise PipelineError(
                f"tile {tile.tile_id} footprint [{x0}:{x1}, {y0}:{y1}] "
                f"falls outside the {width}x{height} base image")
        color = spec.ramp(tile.score)
        tint_sum[y0:y1, x0:x1] += np.asarray(color, dtype=np.float64)
        cover[y0:y1, x0:x1] += 1
    covered = cover > 0
    out = base.copy()
    if covered.any():
        mean_tint = tint_sum[covered] / cover[covered, np.newaxis]
        blended = ((1.0 - spec.opacity) * base[covered].astype(np.float64)
                   + spec.opacity * mean_tint)
        out[covered] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    else:
        log.warning("heatmap has no tiles; output equals the base image")
    return RasterImage(out, spec.base.mpp)


def save_sidecar(tiles: Sequence[ScoredTile], path: str | Path) -> None:
    lines = [HEATMAP_SIDECAR_HEADER]
    for tile in tiles:
        lines.append(f"{tile.tile_id},{tile.score:.17g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_sidecar(path: str | Path) -> dict[str, float]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != HEATMAP_SIDECAR_HEADER:
        raise ValidationError(f"{path}: expected header "
                              f"{HEATMAP_SIDECAR_HEADER!r}")
    out: dict[str, float] = {}
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{number}: expected 2 fields")
        if parts[0] in out:
            raise ValidationError(f"{path}:{number}: duplicate tile id")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            raise ValidationError(
                f"{path}:{number}: non-numeric score") from None
    return out
