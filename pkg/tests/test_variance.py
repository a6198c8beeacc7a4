import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import unit_rows

from asym_lab.augment import BASELINE, deterministic_recipe
from asym_lab.encoder import init_params
from asym_lab.numerics import ConfigError, DegenerateInputError, RngStream
from asym_lab.variance import (VarianceReport, bootstrap_ci, bootstrap_gap_ci, cross_image_variance,
                               intra_image_variance, variance_cdf)

SIZE = 8
IN = 3 * SIZE * SIZE


def _images(n, seed=0):
    # mid-grey with mild texture, so small additive noise is never clipped
    return 0.5 + 0.1 * RngStream(seed, ("vimg",)).uniform(-1, 1, size=(n, 3, SIZE, SIZE))


def _linear(seed=0, d=6):
    W = RngStream(seed, ("lin",)).normal(size=(IN, d))
    return lambda x: x @ W


def _noise_recipe(sigma):
    return deterministic_recipe(SIZE).replace(name=f"noise{sigma}", noise_sigma=sigma)


def _encoder(seed=0):
    return init_params(RngStream(seed, ("venc",)), in_dim=IN, hidden=32, proj_hidden=32, out_dim=16)


# ---------------------------------------------------------------- intra-image variance


def test_deterministic_recipe_gives_exactly_zero():
    rep = intra_image_variance(_encoder(), _images(8), 4, deterministic_recipe(SIZE), RngStream(0),
                               batch_size=8, bn_groups=2, in_size=SIZE)
    assert rep.v == 0.0 and all(v == 0.0 for v in rep.per_image)


def test_doubling_noise_quadruples_unnormalized_variance():
    imgs = _images(32)
    kw = dict(r=256, batch_size=32, normalize=False, in_size=SIZE)
    v1 = intra_image_variance(_linear(), imgs, recipe=_noise_recipe(0.01), rng=RngStream(1), **kw).v
    v2 = intra_image_variance(_linear(), imgs, recipe=_noise_recipe(0.02), rng=RngStream(2), **kw).v
    assert v2 / v1 == pytest.approx(4.0, rel=0.05)


def test_population_variance_regression():
    # a 1-d encoder reading one pixel; noise is replaced by a fixed pattern via a
    # callable so the per-image variance is known exactly
    vals = iter([np.array([[1.0], [3.0]]), np.array([[2.0], [4.0]])])
    rep = intra_image_variance(lambda x: next(vals)[: x.shape[0]], _images(2)[:1], 2,
                               deterministic_recipe(SIZE), RngStream(0), batch_size=1, normalize=False,
                               in_size=SIZE)
    # views {1, 2}: population variance 0.25 (sample variance would be 0.5)
    assert rep.per_image == [0.25]


def test_v_is_mean_of_per_image_values_and_non_negative():
    rep = intra_image_variance(_encoder(), _images(12), 4, BASELINE.replace(out_size=SIZE), RngStream(3),
                               batch_size=6, bn_groups=2, in_size=SIZE)
    assert all(v >= 0 for v in rep.per_image)
    assert rep.v == pytest.approx(np.mean(rep.per_image), rel=1e-15)


def test_image_order_does_not_change_the_report():
    imgs = _images(10)
    perm = RngStream(4).permutation(10)
    kw = dict(r=4, recipe=BASELINE.replace(out_size=SIZE), batch_size=5, in_size=SIZE)
    a = intra_image_variance(_encoder(), imgs, rng=RngStream(5), **kw)
    b = intra_image_variance(_encoder(), imgs[perm], rng=RngStream(5), **kw)
    assert np.array_equal(np.asarray(a.per_image)[perm], b.per_image)
    assert a.v == b.v


def test_r_below_two_rejected():
    with pytest.raises(ConfigError):
        intra_image_variance(_encoder(), _images(2), 1, BASELINE, RngStream(0), in_size=SIZE)
    with pytest.raises(ConfigError):
        intra_image_variance(_encoder(), _images(0), 4, BASELINE, RngStream(0), in_size=SIZE)


@pytest.mark.parametrize("seed", range(5))
def test_mean_encoding_lowers_variance_monotonically(seed):
    imgs = _images(16, seed)
    recipe = _noise_recipe(0.05)
    vs = [intra_image_variance(_encoder(seed), imgs, 16, recipe, RngStream(seed, ("m", n)), mean_enc_n=n,
                               batch_size=16, bn_groups=2, in_size=SIZE).v for n in (1, 2, 3)]
    assert vs[0] > vs[1] > vs[2]


def test_report_files_round_trip():
    rep = VarianceReport([0.1, 0.25, 1e-17], 32, "baseline", "abc", 2)
    back = VarianceReport.from_files(rep.to_csv(), rep.to_json())
    assert back == rep


# ---------------------------------------------------------------- CDF


def test_cdf_single_image():
    assert variance_cdf(VarianceReport([0.3], 2)) == [(0.3, 1.0)]


def test_cdf_known_list():
    pts = variance_cdf(VarianceReport([3.0, 1.0, 4.0, 2.0], 2))
    assert [p[0] for p in pts] == [1.0, 2.0, 3.0, 4.0]
    assert [p[1] for p in pts] == [0.25, 0.5, 0.75, 1.0]


def test_cdf_duplicated_report_is_identical():
    rep = VarianceReport([0.2, 0.1, 0.4], 2)
    twice = VarianceReport(rep.per_image * 2, 2)
    assert {v for v, _ in variance_cdf(rep)} == {v for v, _ in variance_cdf(twice)}
    # the step function is the same: each value's final ordinate matches
    last = lambda pts: {v: f for v, f in pts}
    assert last(variance_cdf(rep)) == last(variance_cdf(twice))


# ---------------------------------------------------------------- cross-image variance


def test_cross_variance_of_standard_basis():
    d = 8
    assert cross_image_variance(np.eye(d)) == pytest.approx((1 / d) * (1 - 1 / d), rel=1e-15)


def test_cross_variance_identical_rows():
    assert cross_image_variance(np.tile(unit_rows(RngStream(0), 1, 5), (6, 1))) == 0.0


def test_cross_variance_uniform_sphere():
    z = unit_rows(RngStream(0, ("sphere",)), 4096, 64)
    assert cross_image_variance(z) == pytest.approx(1 / 64, rel=0.05)


def test_cross_variance_needs_two_rows():
    with pytest.raises(DegenerateInputError):
        cross_image_variance(np.ones((1, 3)))


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(2, 40), st.integers(2, 16))
def test_cross_variance_of_unit_rows_bounded_by_inverse_dim(seed, B, d):
    # sum of per-channel variances = 1 - |mean row|^2 <= 1
    v = cross_image_variance(unit_rows(RngStream(seed), B, d))
    assert 0.0 <= v <= 1.0 / d + 1e-15


# ---------------------------------------------------------------- bootstrap


def test_bootstrap_gap_ci_brackets_gap():
    r = RngStream(9)
    a = VarianceReport(list(r.uniform(1.0, 2.0, 200)), 2)
    b = VarianceReport(list(np.asarray(a.per_image) - 0.5 + r.normal(0, 0.01, 200)), 2)
    gap, lo, hi = bootstrap_gap_ci(a, b, RngStream(1))
    assert lo < gap < hi and lo > 0.45 and hi < 0.55
    lo1, hi1 = bootstrap_ci(a, RngStream(2))
    assert lo1 < a.v < hi1


def test_bootstrap_gap_needs_paired_reports():
    with pytest.raises(ConfigError):
        bootstrap_gap_ci(VarianceReport([1.0, 2.0], 2), VarianceReport([1.0], 2), RngStream(0))
