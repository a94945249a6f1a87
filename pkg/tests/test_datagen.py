import math

import numpy as np
import pytest
from scipy import integrate, stats

from d3lab.datagen import (
    corrupt_labels,
    export_csv,
    gen_blob_classification,
    gen_inr_dataset,
    gen_sigmoid_regression,
    load_pgm,
    pixel_coordinates,
    ramp_image,
    save_pgm,
    sigmoid_target,
)
from d3lab.discrepancy import CLASS_DISAGREEMENT, d_N, psnr


def test_sigmoid_regression_domain_and_noise():
    ds = gen_sigmoid_regression(N=100, domain_lo=-2, domain_hi=2, sigma=0.5, seed=0)
    assert ds.N == 100
    assert ds.xs.min() >= -2 and ds.xs.max() <= 2
    resid = ds.ys_noisy - ds.ys_clean
    assert 0.35 < resid.std() < 0.65
    np.testing.assert_allclose(ds.ys_clean, np.tanh(ds.xs / 2), atol=1e-15)


def test_sigmoid_zero_noise_and_symmetry():
    ds = gen_sigmoid_regression(sigma=0.0, seed=4)
    np.testing.assert_array_equal(ds.ys_noisy, ds.ys_clean)
    assert sigmoid_target(0.0) == 0.0
    assert np.isinf(sigmoid_target(0.0, literal=True))


def test_sigmoid_rejects_bad_args():
    with pytest.raises(ValueError):
        gen_sigmoid_regression(sigma=-1)
    with pytest.raises(ValueError):
        gen_sigmoid_regression(domain_lo=1, domain_hi=1)


def test_blobs_deterministic_and_balanced():
    a = gen_blob_classification(100, 4, 3, 0.5, seed=2)
    b = gen_blob_classification(100, 4, 3, 0.5, seed=2)
    np.testing.assert_array_equal(a.xs, b.xs)
    np.testing.assert_array_equal(a.ys_noisy, b.ys_noisy)
    assert np.bincount(a.ys_noisy).tolist() == [25] * 4


def test_blobs_far_clusters_nearest_center():
    ds = gen_blob_classification(60, 2, 2, 0.1, seed=0, center_scale=20.0)
    centers = np.stack([ds.xs[ds.ys_clean == k].mean(0) for k in range(2)])
    nearest = np.argmin(((ds.xs[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(nearest, ds.ys_clean)
    with pytest.raises(ValueError):
        gen_blob_classification(10, 2, 2, 0.0, 0)


def test_full_corruption_keeps_a_tenth():
    ds = corrupt_labels(gen_blob_classification(10000, 10, 2, 1.0, 0), 1.0, seed=1)
    frac = np.mean(ds.ys_noisy == ds.ys_clean)
    assert abs(frac - 0.1) <= 0.01


def test_zero_rate_unchanged():
    base = gen_blob_classification(200, 5, 2, 1.0, 0)
    ds = corrupt_labels(base, 0.0, seed=3)
    np.testing.assert_array_equal(ds.ys_noisy, base.ys_noisy)
    assert ds.noise_meta.realized_E == 0.0


def test_half_corruption_within_binomial_band():
    N, K = 10000, 10
    ds = corrupt_labels(gen_blob_classification(N, K, 2, 1.0, 0), 0.5, seed=7)
    n = round(0.5 * N)
    p = (K - 1) / K
    sd = math.sqrt(n * p * (1 - p)) / N
    assert abs(ds.noise_meta.realized_E - 0.45) <= 3 * sd


def test_corruption_touches_only_selected_labels():
    base = gen_blob_classification(500, 4, 2, 1.0, 0)
    ds = corrupt_labels(base, 0.3, seed=11)
    assert ds.N == base.N and ds.n_classes == base.n_classes
    np.testing.assert_array_equal(ds.xs, base.xs)
    assert np.count_nonzero(ds.ys_noisy != base.ys_noisy) <= round(0.3 * 500)
    assert ds.noise_meta.realized_E == d_N(ds.ys_noisy, ds.ys_clean, CLASS_DISAGREEMENT)
    with pytest.raises(ValueError):
        corrupt_labels(gen_sigmoid_regression(), 0.1, 0)


def test_pixel_coordinates_corner():
    g = pixel_coordinates(4, 5)
    np.testing.assert_array_equal(g[0], [-1.0, -1.0])
    np.testing.assert_array_equal(g[-1], [1.0, 1.0])
    assert g.shape == (20, 2)


def _clipped_noise_psnr(levels, sigma):
    # expected PSNR of clip(c + n) vs c, averaged over the image's levels
    s = sigma / 255.0

    def mse(c):
        f = lambda n: (np.clip(c + n, 0, 1) - c) ** 2 * stats.norm.pdf(n, 0, s)
        return integrate.quad(f, -10 * s, 10 * s, points=[-c, 1 - c], limit=200)[0]

    return 10 * math.log10(1.0 / np.mean([mse(c) for c in levels]))


def test_inr_noise_psnr_matches_clipped_gaussian_oracle():
    img = ramp_image(64, 64)
    ds = gen_inr_dataset(img, 25, seed=0)
    oracle = _clipped_noise_psnr(img[0], 25)
    assert abs(psnr(ds.ys_noisy, ds.ys_clean) - oracle) <= 0.3


def test_inr_noise_psnr_unclipped_level():
    # a mid-range ramp barely clips, so the plain 20 log10(255/25) applies
    img = ramp_image(64, 64, lo=0.25, hi=0.75)
    ds = gen_inr_dataset(img, 25, seed=0)
    assert abs(psnr(ds.ys_noisy, ds.ys_clean) - 20 * math.log10(255 / 25)) <= 0.3


def test_inr_zero_noise():
    ds = gen_inr_dataset(ramp_image(8, 8), 0, seed=0)
    assert psnr(ds.ys_noisy, ds.ys_clean) == math.inf
    with pytest.raises(ValueError):
        gen_inr_dataset(ramp_image(8, 8), -1, 0)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9)) / 255.0
    save_pgm(img, tmp_path / "a.pgm")
    np.testing.assert_array_equal(load_pgm(tmp_path / "a.pgm"), img)


def test_pgm_single_pixel_and_comments(tmp_path):
    p = tmp_path / "one.pgm"
    p.write_bytes(b"P5\n# a comment\n1 1\n255\n" + bytes([128]))
    assert load_pgm(p)[0, 0] == 128 / 255


def test_pgm_errors(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ValueError):
        load_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(3))
    with pytest.raises(ValueError):
        load_pgm(p)
    p.write_bytes(b"P2\n")
    with pytest.raises(ValueError):
        load_pgm(p)


def test_export_csv(tmp_path):
    ds = gen_sigmoid_regression(N=3, seed=0)
    export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "x0,y_noisy0,y_clean0"
    assert len(lines) == 4
    assert float(lines[1].split(",")[0]) == ds.xs[0, 0]
