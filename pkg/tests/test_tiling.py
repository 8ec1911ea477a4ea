from __future__ import annotations

import numpy as np
import pytest

from histotype.errors import ManifestError, ValidationError
from histotype.rng import Xoshiro256StarStar
from histotype.tiling import (
    RasterImage,
    TissueMask,
    TissueParams,
    axis_origins,
    detect_tissue,
    extract_tile,
    load_tile_manifest,
    plan_tiles,
    resample_to_target_mpp,
    save_tile_manifest,
)

from _oracles import enumerate_origins, origin_count_law


def full_mask(width, height):
    return TissueMask(np.ones((height, width), dtype=bool), 1)


def test_origin_law_on_random_triples():
    rng = Xoshiro256StarStar(42)
    cases = [(2048, 512, 64), (512, 512, 64), (511, 512, 64)]
    while len(cases) < 100:
        tile = 8 + rng.next_below(512)
        overlap = rng.next_below(tile)
        dim = rng.next_below(4096)
        cases.append((dim, tile, overlap))
    for dim, tile, overlap in cases:
        stride = tile - overlap
        origins = axis_origins(dim, tile, stride)
        assert origins == enumerate_origins(dim, tile, stride)
        assert len(origins) == origin_count_law(dim, tile, stride)
        assert all(x + tile <= dim for x in origins)


def test_zero_overlap_is_exact_partition():
    origins = axis_origins(1024, 128, 128)
    assert origins == list(range(0, 1024, 128))
    covered = []
    for x in origins:
        covered.extend(range(x, x + 128))
    assert covered == list(range(1024))  # disjoint and complete


def test_grid_row_major_and_fraction_filter():
    mask = np.zeros((8, 8), dtype=bool)
    mask[:, :4] = True  # left half tissue
    grid = plan_tiles(8, 8, 2, 0, TissueMask(mask, 1),
                      min_tissue_fraction=0.5, wsi_id="w")
    # left-half tiles only, row-major (y outer, x inner)
    assert [(r.x, r.y) for r in grid.records] == [
        (x, y) for y in range(0, 8, 2) for x in range(0, 4, 2)
    ]
    assert all(r.tissue_fraction == 1.0 for r in grid.records)
    assert all(r.tile_id == f"w_{r.x:06d}_{r.y:06d}" for r in grid.records)


def test_fraction_matches_manual_count_at_full_resolution():
    rng = Xoshiro256StarStar(7)
    mask = np.array([[rng.random() < 0.5 for _ in range(16)]
                     for _ in range(16)], dtype=bool)
    grid = plan_tiles(16, 16, 4, 0, TissueMask(mask, 1),
                      min_tissue_fraction=0.0, wsi_id="w")
    for rec in grid.records:
        manual = mask[rec.y : rec.y + 4, rec.x : rec.x + 4].mean()
        assert rec.tissue_fraction == pytest.approx(manual)
    kept = plan_tiles(16, 16, 4, 0, TissueMask(mask, 1),
                      min_tissue_fraction=0.5, wsi_id="w")
    assert all(r.tissue_fraction >= 0.5 for r in kept.records)


def test_fraction_uses_downsampled_mask_footprint():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    grid = plan_tiles(16, 16, 8, 0, TissueMask(mask, 4),
                      min_tissue_fraction=0.0, wsi_id="w")
    by_origin = {(r.x, r.y): r.tissue_fraction for r in grid.records}
    assert by_origin[(0, 0)] == pytest.approx(0.25)  # 1 of 4 mask cells
    assert by_origin[(8, 8)] == 0.0


def test_overlap_validation():
    with pytest.raises(ValidationError):
        plan_tiles(100, 100, 32, 600, full_mask(100, 100))
    with pytest.raises(ValidationError):
        plan_tiles(100, 100, 32, 32, full_mask(100, 100))
    with pytest.raises(ValidationError):
        plan_tiles(100, 100, 0, 0, full_mask(100, 100))


def test_tile_larger_than_image_gives_empty_grid(caplog):
    with caplog.at_level("WARNING", logger="histotype.tiling"):
        grid = plan_tiles(100, 100, 128, 0, full_mask(100, 100), wsi_id="w9")
    assert grid.records == ()
    assert any("empty grid" in r.message for r in caplog.records)


def test_resample_halves_dimensions():
    pixels = np.zeros((1024, 1024, 3), dtype=np.uint8)
    out = resample_to_target_mpp(RasterImage(pixels, 0.25), 0.5)
    assert (out.width, out.height, out.mpp) == (512, 512, 0.5)


def test_resample_identity_is_byte_identical():
    rng = Xoshiro256StarStar(1)
    pixels = np.array([[[rng.next_below(256) for _ in range(3)]
                        for _ in range(10)] for _ in range(10)], dtype=np.uint8)
    out = resample_to_target_mpp(RasterImage(pixels, 0.5), 0.5)
    assert np.array_equal(out.pixels, pixels)


def test_resample_preserves_constant_regions():
    pixels = np.full((64, 64, 3), 137, dtype=np.uint8)
    out = resample_to_target_mpp(RasterImage(pixels, 0.25), 0.5)
    assert np.all(out.pixels == 137)


def test_resample_rejects_upsampling():
    pixels = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(ValidationError):
        resample_to_target_mpp(RasterImage(pixels, 0.5), 0.25)


def test_detect_tissue_pure_white_is_empty():
    img = RasterImage(np.full((64, 64, 3), 255, dtype=np.uint8), 0.5)
    mask = detect_tissue(img, downsample=4)
    assert not mask.mask.any()
    assert mask.mask.shape == (16, 16)


def test_detect_tissue_fully_saturated_is_full():
    pixels = np.zeros((64, 64, 3), dtype=np.uint8)
    pixels[:, :, 0] = 200  # saturated red everywhere
    mask = detect_tissue(RasterImage(pixels, 0.5), downsample=4)
    assert mask.mask.all()


def test_detect_tissue_disk_iou_against_ground_truth():
    size = 256
    yy, xx = np.mgrid[0:size, 0:size]
    disk = (yy - 128) ** 2 + (xx - 128) ** 2 <= 80**2
    pixels = np.full((size, size, 3), 248, dtype=np.uint8)
    pixels[disk] = (228, 130, 180)  # pink tissue
    got = detect_tissue(RasterImage(pixels, 0.5), downsample=4).mask
    # ground truth at mask resolution: majority of each 4x4 block
    truth = disk.reshape(64, 4, 64, 4).mean(axis=(1, 3)) >= 0.5
    inter = (got & truth).sum()
    union = (got | truth).sum()
    assert inter / union >= 0.95


def test_detect_tissue_fixed_threshold_mode():
    pixels = np.full((32, 32, 3), 255, dtype=np.uint8)
    pixels[:16] = (200, 120, 160)
    params = TissueParams(use_otsu=False, saturation_threshold=0.2)
    mask = detect_tissue(RasterImage(pixels, 0.5), 1, params).mask
    assert mask[:16].all()
    assert not mask[18:].any()


def test_closing_fills_single_pixel_holes():
    pixels = np.zeros((32, 32, 3), dtype=np.uint8)
    pixels[:, :, 0] = 200
    pixels[10, 10] = (255, 255, 255)  # unsaturated pinhole in tissue
    mask = detect_tissue(RasterImage(pixels, 0.5), downsample=1).mask
    assert mask[10, 10]


def test_extract_tile_slices_and_checks_bounds():
    pixels = np.arange(8 * 8 * 3, dtype=np.uint8).reshape(8, 8, 3)
    img = RasterImage(pixels, 0.5)
    tile = extract_tile(img, 2, 4, 3)
    assert np.array_equal(tile, pixels[4:7, 2:5])
    tile[0, 0, 0] = 99  # copy, not a view
    assert pixels[4, 2, 0] != 99
    with pytest.raises(ValidationError):
        extract_tile(img, 6, 0, 3)


def test_tile_manifest_roundtrip(tmp_path):
    mask = full_mask(8, 8)
    grid = plan_tiles(8, 8, 4, 0, mask, 0.5, "w1")
    path = tmp_path / "tiles.csv"
    save_tile_manifest(grid.records, path)
    loaded = load_tile_manifest(path)
    assert loaded == list(grid.records)
    bad = path.read_text().replace("w1_000004_000000", "w1_000000_000000")
    (tmp_path / "dup.csv").write_text(bad)
    with pytest.raises(ManifestError, match="duplicate"):
        load_tile_manifest(tmp_path / "dup.csv")
