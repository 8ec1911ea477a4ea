"""Synthetic cohort generation: determinism, truth, and geometry."""

import hashlib

import numpy as np
import pytest

from histotype import CLASS_ORDER
from histotype.config import load_config
from histotype.errors import ValidationError
from histotype.manifest import load_manifest
from histotype.rng import Xoshiro256StarStar, derive_seed
from histotype.synthetic import (CATEGORY_FOLD, CATEGORY_MARKER,
                                 CATEGORY_TUMOR, SynthConfig,
                                 category_truth_path,
                                 generate_synthetic_cohort,
                                 jittered_stain_matrix, load_category_raster,
                                 render_slide, synthesize_categories,
                                 tumor_positive_tiles, upsample_nearest_2x)
from histotype.tiling import (TileRecord, detect_tissue, load_image,
                              plan_tiles, resample_to_target_mpp)


def tree_hashes(root):
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            out[str(path.relative_to(root))] = digest
    return out


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    return generate_synthetic_cohort(SynthConfig(out_dir=root, seed=7))


def test_four_by_five_seed_seven_yields_twenty_slides(cohort):
    manifest = load_manifest(cohort.manifest_path)
    assert len(manifest.records) == 20
    assert len(cohort.wsi_ids) == 20
    for rec in manifest.records:
        assert (cohort.root / rec.image_path).is_file()
        assert category_truth_path(cohort.truth_dir, rec.wsi_id).is_file()
    by_label = {}
    for rec in manifest.records:
        by_label.setdefault(rec.label, []).append(rec.wsi_id)
    assert {k: len(v) for k, v in by_label.items()} == \
        {cls: 5 for cls in CLASS_ORDER}


def test_regeneration_is_byte_identical(cohort, tmp_path):
    again = generate_synthetic_cohort(SynthConfig(out_dir=tmp_path, seed=7))
    assert tree_hashes(cohort.root) == tree_hashes(again.root)


def test_different_seed_changes_pixels(cohort, tmp_path):
    other = generate_synthetic_cohort(SynthConfig(out_dir=tmp_path, seed=8))
    first = tree_hashes(cohort.root)
    second = tree_hashes(other.root)
    assert first != second
    assert set(first) == set(second)


def test_category_rasters_are_working_plane_and_coded(cohort):
    manifest = load_manifest(cohort.manifest_path)
    for rec in manifest.records:
        cats = load_category_raster(
            category_truth_path(cohort.truth_dir, rec.wsi_id))
        assert cats.shape == (192, 256)
        assert set(np.unique(cats)) <= {0, 1, 2, 3, 4}
        assert int((cats == CATEGORY_TUMOR).sum()) > 900


def test_artifact_categories_appear_somewhere(cohort):
    manifest = load_manifest(cohort.manifest_path)
    seen = set()
    for rec in manifest.records:
        cats = load_category_raster(
            category_truth_path(cohort.truth_dir, rec.wsi_id))
        seen.update(np.unique(cats).tolist())
    assert CATEGORY_FOLD in seen
    assert CATEGORY_MARKER in seen


def test_stain_truth_is_unit_normalized_and_ordered(cohort):
    manifest = load_manifest(cohort.manifest_path)
    for rec in manifest.records:
        path = cohort.truth_dir / f"{rec.wsi_id}_stain.txt"
        rows = [[float(v) for v in line.split()]
                for line in path.read_text().splitlines()]
        matrix = np.array(rows)
        assert matrix.shape == (3, 2)
        assert np.allclose(np.linalg.norm(matrix, axis=0), 1.0, atol=1e-12)
        angle = np.degrees(np.arccos(np.clip(
            matrix[:, 0] @ matrix[:, 1], -1, 1)))
        assert angle >= 16.0
        assert matrix[2, 0] > matrix[2, 1]


def test_mpp_alternates_and_fine_slides_are_doubled(cohort):
    manifest = load_manifest(cohort.manifest_path)
    mpps = sorted(rec.source_mpp for rec in manifest.records)
    assert mpps.count(0.25) == 10
    assert mpps.count(0.5) == 10
    for rec in manifest.records:
        image = load_image(cohort.root / rec.image_path, rec.source_mpp)
        if rec.source_mpp == 0.25:
            assert (image.height, image.width) == (384, 512)
        else:
            assert (image.height, image.width) == (192, 256)


def test_box_resample_inverts_the_nearest_upsample(cohort):
    manifest = load_manifest(cohort.manifest_path)
    fine = next(r for r in manifest.records if r.source_mpp == 0.25)
    image = load_image(cohort.root / fine.image_path, fine.source_mpp)
    resampled = resample_to_target_mpp(image, 0.5)
    assert resampled.pixels.shape == (192, 256, 3)
    assert np.array_equal(resampled.pixels, image.pixels[::2, ::2])


def test_slides_tile_into_tissue_and_tumor(cohort):
    manifest = load_manifest(cohort.manifest_path)
    for rec in manifest.records[:6]:
        image = load_image(cohort.root / rec.image_path, rec.source_mpp)
        image = resample_to_target_mpp(image, 0.5)
        mask = detect_tissue(image, downsample=8)
        grid = plan_tiles(image.width, image.height, 32, 0, mask)
        assert len(grid.records) >= 8
        cats = load_category_raster(
            category_truth_path(cohort.truth_dir, rec.wsi_id))
        tumor = tumor_positive_tiles(cats, grid.records, 32)
        assert len(tumor) >= 3
        assert tumor <= {r.tile_id for r in grid.records}


def test_background_corners_are_white(cohort):
    manifest = load_manifest(cohort.manifest_path)
    coarse = next(r for r in manifest.records if r.source_mpp == 0.5)
    image = load_image(cohort.root / coarse.image_path, coarse.source_mpp)
    assert np.array_equal(image.pixels[0, 0], [255, 255, 255])
    assert np.array_equal(image.pixels[-1, -1], [255, 255, 255])


def test_emitted_config_is_ready_to_run(cohort):
    cfg = load_config(cohort.config_path)
    assert cfg.manifest == cohort.manifest_path
    assert cfg.tile_size == 32
    # uniform tiling: class-specific overlap would leak labels into counts
    assert cfg.overlap_her2 == 0
    assert cfg.scorer_truth_dir == cohort.truth_dir
    assert cfg.scorer_signal == 1.0
    assert cfg.seed == 7
    assert cfg.split_fractions == (0.5, 0.0, 0.25, 0.25)


def test_signal_flows_into_the_emitted_config(tmp_path):
    out = generate_synthetic_cohort(
        SynthConfig(out_dir=tmp_path, classes=("LumA", "Basal"),
                    wsis_per_class=1, signal=0.25, seed=3))
    cfg = load_config(out.config_path)
    assert cfg.scorer_signal == 0.25
    assert len(load_manifest(out.manifest_path).records) == 2


def test_render_slide_is_seed_deterministic():
    rng = Xoshiro256StarStar(derive_seed(11, "wsi", "x"))
    cats = synthesize_categories(128, 96, rng)
    matrix = jittered_stain_matrix(rng)
    first = render_slide(cats, matrix, derive_seed(11, "noise", "x"))
    second = render_slide(cats, matrix, derive_seed(11, "noise", "x"))
    other = render_slide(cats, matrix, derive_seed(11, "noise", "y"))
    assert np.array_equal(first, second)
    assert not np.array_equal(first, other)
    assert first.dtype == np.uint8 and first.shape == (96, 128, 3)


def test_upsample_doubles_every_pixel():
    block = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    up = upsample_nearest_2x(block)
    assert up.shape == (4, 4, 3)
    assert np.array_equal(up[::2, ::2], block)
    assert np.array_equal(up[1::2, 1::2], block)


def test_tumor_tile_truth_respects_bounds():
    cats = np.zeros((64, 64), dtype=np.uint8)
    cats[:32, :32] = CATEGORY_TUMOR
    inside = TileRecord("t_000000_000000", "t", 0, 0, 1.0)
    outside = TileRecord("t_000048_000000", "t", 48, 0, 1.0)
    assert tumor_positive_tiles(cats, [inside], 32) == {inside.tile_id}
    with pytest.raises(ValidationError, match="exceeds"):
        tumor_positive_tiles(cats, [outside], 32)


def test_synth_config_validation():
    with pytest.raises(ValidationError, match="signal"):
        SynthConfig(out_dir=".", signal=1.5)
    with pytest.raises(ValidationError, match="wsis_per_class"):
        SynthConfig(out_dir=".", wsis_per_class=0)
    with pytest.raises(ValidationError, match="unknown classes"):
        SynthConfig(out_dir=".", classes=("LumA", "Ductal"))
    with pytest.raises(ValidationError, match="at least 64"):
        SynthConfig(out_dir=".", wsi_height=32)
