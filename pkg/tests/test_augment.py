import numpy as np
import pytest
from hypothesis import given, strategies as st

from asym_lab.augment import (BASELINE, STRONGER, WEAKER, BoxSpec, Recipe, apply_recipe, augment_batch, blur3,
                              color_jitter, deterministic_recipe, preset, random_resized_crop, resize, scalemix,
                              scalemix_box, scalemix_mask, small_view_recipe, with_strength)
from asym_lab.numerics import ConfigError, RngStream, ShapeError


def _img(seed=0, size=32):
    return RngStream(seed, ("img",)).uniform(size=(3, size, size))


# ---------------------------------------------------------------- crop / resample


def test_full_scale_crop_at_input_size_is_identity():
    img = _img()
    out = random_resized_crop(img, (1.0, 1.0), 32, RngStream(1))
    assert np.allclose(out, img, atol=1e-15)


def test_constant_image_stays_constant():
    img = np.full((3, 32, 32), 0.37)
    for s in range(5):
        out = random_resized_crop(img, (0.1, 0.9), 16, RngStream(s))
        assert np.allclose(out, 0.37, atol=1e-15)


def test_checkerboard_upsample_center_is_half():
    board = np.array([[1.0, 0.0], [0.0, 1.0]])[None].repeat(3, axis=0)
    out = resize(board[None], 3)[0]
    assert out[0, 1, 1] == pytest.approx(0.5, abs=1e-15)


def test_crop_is_deterministic_given_stream():
    img = _img(3)
    a = random_resized_crop(img, (0.2, 1.0), 24, RngStream(5, ("c",)))
    b = random_resized_crop(img, (0.2, 1.0), 24, RngStream(5, ("c",)))
    assert np.array_equal(a, b)


def test_crop_falls_back_to_center_when_box_cannot_fit(caplog):
    # a very wide output aspect on a square image cannot reach scale 1
    img = _img(4)
    with caplog.at_level("INFO"):
        out = random_resized_crop(img, (1.0, 1.0), (8, 32), RngStream(0))
    assert out.shape == (3, 8, 32)
    assert "fallback" in caplog.text


def test_bad_scale_range_rejected():
    with pytest.raises(ConfigError):
        random_resized_crop(_img(), (0.5, 0.2), 16, RngStream(0))


# ---------------------------------------------------------------- photometric


def test_pixels_stay_in_unit_range_under_strong_jitter():
    imgs = RngStream(0).uniform(size=(16, 3, 8, 8))
    out = color_jitter(imgs, 1.0, 2.0, 0.5, RngStream(1))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_blur_preserves_constants():
    x = np.full((2, 3, 6, 6), 0.25)
    assert np.allclose(blur3(x), 0.25, atol=1e-16)


GEOMETRIC = BASELINE.replace(jitter_prob=0.0, blur_prob=0.0)


def test_geometric_recipe_only_rearranges_values_on_constant_channels():
    # each channel is a single value; geometric ops with nearest resampling can
    # only copy those values, so the output support stays within the input's
    img = np.stack([np.full((32, 32), v) for v in (0.1, 0.5, 0.9)])
    recipe = GEOMETRIC.replace(interpolation="nearest")
    for s in range(10):
        v = apply_recipe(img, recipe, RngStream(s)).standard[0]
        for c, val in enumerate((0.1, 0.5, 0.9)):
            assert set(np.unique(v[c]).tolist()) == {val}


def test_geometric_recipe_bilinear_stays_within_input_range():
    img = _img(7)
    v = apply_recipe(img, GEOMETRIC, RngStream(2)).standard[0]
    for c in range(3):
        assert img[c].min() - 1e-12 <= v[c].min() and v[c].max() <= img[c].max() + 1e-12


def _corpus():
    from asym_lab.harness.data import DatasetSpec, make_synthetic_dataset
    # smooth images: on heavy pixel noise the blur's smoothing outweighs the jitter
    ds = make_synthetic_dataset(DatasetSpec(train_per_class=4, eval_per_class=1, pixel_noise=0.0), RngStream(0))
    return ds.train_images[:24]


def _pixel_variance(recipe, n_draws=32):
    imgs = _corpus()
    vs = np.stack([augment_batch(imgs, recipe, RngStream(7, ("draw", k))).standard for k in range(n_draws)])
    return float(vs.var(axis=0).mean())


def test_recipe_strength_monotonicity():
    weak, base, strong = (_pixel_variance(r) for r in (WEAKER, BASELINE, STRONGER))
    assert weak <= base <= strong


def test_with_strength_keeps_geometry():
    r = with_strength(BASELINE.replace(crop_scale=(0.5, 1.0), scalemix=True), WEAKER)
    assert r.crop_scale == (0.5, 1.0) and r.scalemix and r.name == "weaker"
    assert (r.jitter_prob, r.blur_prob) == (WEAKER.jitter_prob, WEAKER.blur_prob)


# ---------------------------------------------------------------- ScaleMix


def test_scalemix_zero_lambda_returns_first_view():
    a, b = _img(1), _img(2)
    out = scalemix(a, b, RngStream(0), lam=0.0)
    assert np.array_equal(out, a)


def test_scalemix_full_box_at_center_returns_second_view():
    a, b = _img(1), _img(2)
    out = scalemix(a, b, RngStream(0), lam=1.0, center=(16.0, 16.0))
    assert np.array_equal(out, b)


def test_scalemix_shape_mismatch():
    with pytest.raises(ShapeError):
        scalemix(_img(1, 32), _img(2, 16), RngStream(0))


def test_box_keeps_view_aspect_ratio():
    box = scalemix_box(24, 32, 0.3, (10.0, 10.0))
    assert box.w / box.h == pytest.approx(32 / 24, rel=1e-15)
    assert box.w * box.h == pytest.approx(0.3 * 24 * 32, rel=1e-12)


def test_box_clipped_at_border():
    m = scalemix_mask(10, 10, BoxSpec(0.0, 0.0, 6.0, 6.0))
    assert (m == 0).sum() == 9  # 3x3 corner survives clipping


def test_scalemix_lambda_fraction_over_1000_draws():
    H = W = 32
    r = RngStream(11, ("lam",))
    checked = 0
    for k in range(1000):
        lam = float(r.uniform())
        w, h = W * np.sqrt(lam), H * np.sqrt(lam)
        # centre drawn so that the box lies fully inside the image
        cx = float(r.uniform(w / 2, W - w / 2))
        cy = float(r.uniform(h / 2, H - h / 2))
        m = scalemix_mask(H, W, scalemix_box(H, W, lam, (cx, cy)))
        zeros = int((m == 0).sum())
        assert abs(zeros - lam * H * W) <= W, (k, lam, zeros)
        checked += 1
    assert checked == 1000


@given(st.integers(0, 2**31))
def test_scalemix_pixels_come_from_source_views(seed):
    r = RngStream(seed)
    a = np.round(r.uniform(size=(3, 8, 8)), 2)
    b = np.round(r.uniform(size=(3, 8, 8)), 2) + 2.0  # disjoint value sets
    out = scalemix(a, b, r.child("mix"))
    from_a = np.isin(out, a)
    from_b = np.isin(out, b)
    assert np.all(from_a | from_b)
    # each pixel location takes all channels from the same view
    assert np.all(from_a.all(axis=0) | from_b.all(axis=0))


# ---------------------------------------------------------------- recipes


def test_deterministic_recipe_returns_input():
    img = _img(9)
    v = apply_recipe(img, deterministic_recipe(), RngStream(0))
    assert np.allclose(v.standard[0], img, atol=1e-15)


def test_multicrop_viewset_sizes():
    vs = apply_recipe(_img(1), BASELINE.replace(multicrop_m=6, small_size=16), RngStream(0))
    assert len(vs.standard) == 1 and vs.standard[0].shape == (3, 32, 32)
    assert len(vs.small) == 6 and all(v.shape == (3, 16, 16) for v in vs.small)


def test_identical_stream_identical_bits():
    img = _img(2)
    r = BASELINE.replace(multicrop_m=2, scalemix=True)
    a = apply_recipe(img, r, RngStream(3, ("v",)))
    b = apply_recipe(img, r, RngStream(3, ("v",)))
    assert all(np.array_equal(x, y) for x, y in zip(a.standard + a.small, b.standard + b.small))


def test_toggling_multicrop_does_not_shift_standard_view():
    img = _img(2)
    a = apply_recipe(img, BASELINE, RngStream(3))
    b = apply_recipe(img, BASELINE.replace(multicrop_m=4), RngStream(3))
    assert np.array_equal(a.standard[0], b.standard[0])


def test_recipe_text_round_trip():
    r = STRONGER.replace(scalemix=True, multicrop_m=3, crop_scale=(0.3, 0.9))
    assert Recipe.from_text(r.to_text()) == r


@pytest.mark.parametrize("bad", [{"crop_scale": (0.0, 1.0)}, {"crop_scale": (0.5, 1.2)}, {"flip_prob": 1.5},
                                 {"multicrop_m": -1}, {"interpolation": "cubic"}, {"noise_sigma": -0.1}])
def test_invalid_recipes_rejected(bad):
    with pytest.raises(ConfigError):
        BASELINE.replace(**bad)


def test_unknown_recipe_key_rejected():
    with pytest.raises(ConfigError, match="unknown recipe key"):
        Recipe.from_text("crop_scale = 0.2, 1.0\nsparkle = 3\n")


def test_presets_and_small_view_recipe():
    assert preset("weaker") == WEAKER
    with pytest.raises(ConfigError):
        preset("heroic")
    s = small_view_recipe(BASELINE)
    assert s.out_size == BASELINE.small_size and s.crop_scale == BASELINE.small_scale
