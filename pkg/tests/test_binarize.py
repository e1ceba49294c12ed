import numpy as np
import pytest

from calligen.binarize import (
    INK,
    PAPER,
    NoRegionsError,
    Region,
    SegmentationError,
    SegmenterPrompt,
    binarize_and_normalize,
    count_positive_points,
    extract_regions,
    fit_to_canvas,
    kmeans_centers,
    otsu_fallback_segmenter,
    otsu_threshold,
    sample_prompt_points,
    segment,
    to_gray,
)
from calligen.synth import render_noisy_photo
from oracles import exhaustive_otsu, flood_fill_regions, region_sets


# -- Otsu -------------------------------------------------------------------


def test_otsu_on_pure_black_and_white():
    img = np.full((10, 10), 255, np.uint8)
    img[2:5, 3:8] = 0
    t, mask = otsu_threshold(img)
    assert np.array_equal(mask, img == 0)
    assert 0 <= t < 255


def test_otsu_constant_image():
    t, mask = otsu_threshold(np.full((7, 9), 131, np.uint8))
    assert t == 131 and not mask.any()


@pytest.mark.parametrize("seed", range(12))
def test_otsu_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    if seed % 3 == 0:
        img = rng.integers(0, 256, size=(24, 31))
    else:
        img = np.clip(np.where(rng.random((24, 31)) < 0.3, rng.normal(60, 25, (24, 31)),
                               rng.normal(190, 30, (24, 31))), 0, 255)
    gray = to_gray(np.rint(img).astype(np.uint8))
    t, mask = otsu_threshold(gray)
    assert t == exhaustive_otsu(gray)
    assert np.array_equal(mask, gray <= t)


def test_to_gray_channels():
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[..., 0] = 255
    assert to_gray(rgb)[0, 0] == 76  # 0.299 * 255
    assert to_gray(np.dstack([rgb, np.full((2, 2), 9, np.uint8)])).shape == (2, 2)
    with pytest.raises(ValueError):
        to_gray(np.zeros((2, 2, 5)))


# -- regions ----------------------------------------------------------------


def test_single_square_region():
    mask = np.zeros((40, 40), bool)
    mask[5:25, 10:30] = True
    (region,) = extract_regions(mask)
    assert region.area == 400


def test_small_squares_are_dropped():
    mask = np.zeros((30, 30), bool)
    mask[0:5, 0:5] = mask[20:25, 20:25] = True
    assert extract_regions(mask, min_area=100) == []
    assert len(extract_regions(mask, min_area=24)) == 2
    assert extract_regions(mask, min_area=25) == []  # strictly greater


def test_diagonal_touch_is_connected():
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True
    assert [r.area for r in extract_regions(mask, min_area=0)] == [3]


@pytest.mark.parametrize("seed", range(100))
def test_regions_match_flood_fill(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(8, 48, size=2)
    density = rng.uniform(0.2, 0.7)
    mask = rng.random((h, w)) < density
    min_area = int(rng.choice([0, 3, 10, 100]))
    assert region_sets(extract_regions(mask, min_area)) == set(flood_fill_regions(mask, min_area))


# -- prompt points ------------------------------------------------------------


@pytest.mark.parametrize(
    "region_area, expected",
    [(760, 1), (10_006, 10), (100_000, 20), (1, 1), (99_999, 20), (20_000, 20), (19_999, 19)],
)
def test_positive_point_count_table(region_area, expected):
    assert count_positive_points(region_area, 100_000) == expected


def test_positive_point_count_bounds():
    for area in range(0, 5000, 37):
        assert 1 <= count_positive_points(area, 4096) <= 20
    with pytest.raises(ValueError):
        count_positive_points(10, 0)


def square_region(y0, x0, side, label=1):
    ys, xs = np.mgrid[y0:y0 + side, x0:x0 + side]
    return Region(label, np.stack([ys.ravel(), xs.ravel()], 1))


def test_full_image_region_gets_twenty_points():
    region = square_region(0, 0, 30)
    prompt = sample_prompt_points([region], (30, 30), seed=0)
    assert len(prompt.positives) == 20
    assert prompt.negatives == []  # no background left


def test_prompt_points_inside_regions_and_negatives_outside():
    regions = [square_region(10, 10, 20, 1), square_region(60, 70, 15, 2)]
    prompt = sample_prompt_points(regions, (100, 120), seed=3)
    inside = {tuple(p) for r in regions for p in r.pixels.tolist()}
    # 400 * 100 / 12000 = 3.33 -> 3, 225 * 100 / 12000 = 1.9 -> 1
    assert len(prompt.positives) == 4
    assert all((y, x) in inside for x, y in prompt.positives)
    assert len(prompt.negatives) == 50
    assert len(set(prompt.negatives)) == 50
    assert not any((y, x) in inside for x, y in prompt.negatives)


def test_prompt_points_seeded():
    regions = [square_region(5, 5, 40)]
    a = sample_prompt_points(regions, (64, 64), seed=11)
    b = sample_prompt_points(regions, (64, 64), seed=11)
    c = sample_prompt_points(regions, (64, 64), seed=12)
    assert a == b and a != c


def test_prompt_points_need_regions():
    with pytest.raises(NoRegionsError, match="Otsu"):
        sample_prompt_points([], (10, 10))


def test_kmeans_separates_clusters():
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.normal(0, 0.5, (50, 2)), rng.normal(20, 0.5, (50, 2))])
    centers = sorted(kmeans_centers(pts, 2, rng).tolist())
    np.testing.assert_allclose(centers, [[0, 0], [20, 20]], atol=0.3)


# -- segmentation -------------------------------------------------------------


def two_blobs():
    img = np.full((40, 60), 255, np.uint8)
    img[5:20, 5:20] = 0
    img[22:35, 35:55] = 0
    return img


def test_fallback_keeps_only_prompted_component():
    img = two_blobs()
    mask = otsu_fallback_segmenter(img, [(10, 10)], [])
    expected = np.zeros_like(mask)
    expected[5:20, 5:20] = True
    assert np.array_equal(mask, expected)


def test_fallback_on_clean_glyph_equals_otsu_foreground():
    img = two_blobs()
    prompt = sample_prompt_points(extract_regions(img == 0), img.shape)
    assert np.array_equal(segment(img, prompt), img == 0)


def test_mock_segmenter_passes_through():
    img = two_blobs()
    ones = segment(img, SegmenterPrompt([(1, 1)], []), lambda im, p, n: np.ones(im.shape[:2]))
    assert ones.all()


def test_segmenter_failure_carries_context():
    def broken(image, positives, negatives):
        raise RuntimeError("model offline")

    with pytest.raises(SegmentationError, match="model offline"):
        segment(two_blobs(), SegmenterPrompt([(1, 1)], [(2, 2)]), broken)
    with pytest.raises(SegmentationError, match="shape"):
        segment(two_blobs(), SegmenterPrompt(), lambda im, p, n: np.ones((3, 3)))


# -- normalization ------------------------------------------------------------


def test_wide_image_aspect_and_bands():
    img = np.zeros((150, 300), np.uint8)  # all ink
    out = fit_to_canvas(img)
    assert out.shape == (256, 256)
    assert (out[:64] == PAPER).all() and (out[192:] == PAPER).all()
    assert (out[64:192] == INK).all()


def test_pipeline_on_wide_photo():
    img = np.full((150, 300), 255, np.uint8)
    img[20:130, 30:270] = 0
    out = binarize_and_normalize(img)
    ink_rows = np.nonzero((out == INK).any(axis=1))[0]
    assert ink_rows.min() >= 64 and ink_rows.max() < 192


def test_clean_256_input_is_fixed_point():
    img = np.full((256, 256), 255, np.uint8)
    img[40:200, 100:130] = 0
    img[100:120, 20:240] = 0
    out = binarize_and_normalize(img)
    assert np.array_equal(out == INK, img == 0)


def test_empty_foreground_names_the_file():
    with pytest.raises(SegmentationError, match="blank.png"):
        binarize_and_normalize(np.full((50, 50), 200, np.uint8), source="blank.png")


def test_small_strokes_fall_back_to_otsu_mask():
    img = np.full((64, 64), 255, np.uint8)
    img[10:15, 10:15] = 0  # 25 pixels, below the region threshold
    out = binarize_and_normalize(img)
    assert (out == INK).sum() == 25 * 16


@pytest.mark.parametrize("seed", range(50))
def test_noisy_photos_normalize_to_binary_canvas(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(80, 320)), int(rng.integers(80, 320))
    out = binarize_and_normalize(render_noisy_photo(rng, h, w), seed=seed)
    assert out.shape == (256, 256)
    assert set(np.unique(out).tolist()) <= {0, 255}
    ink_rows = np.nonzero((out == INK).any(axis=1))[0]
    ink_cols = np.nonzero((out == INK).any(axis=0))[0]
    # content never leaves the scaled box implied by the aspect ratio
    nh, nw = round(h * 256 / max(h, w)), round(w * 256 / max(h, w))
    assert ink_rows.min() >= (256 - nh) // 2 and ink_rows.max() < (256 - nh) // 2 + nh
    assert ink_cols.min() >= (256 - nw) // 2 and ink_cols.max() < (256 - nw) // 2 + nw
