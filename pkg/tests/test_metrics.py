import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from surfelkit import toys
from surfelkit.metrics import (PSNR_CAP, crop, dct2, depth_order_error, hf_fidelity, idct2, luminance,
                               metrics_report, psnr, ssim)
from surfelkit.rasterizer import SortConfig, render


def naive_dct2(x):
    """Orthonormal DCT-II written out as a double sum over each axis."""
    def matrix(n):
        k = np.arange(n)[:, None]
        i = np.arange(n)[None, :]
        m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
        m[0] /= math.sqrt(2.0)
        return m
    H, W = x.shape
    out = np.zeros((H, W))
    Mh, Mw = matrix(H), matrix(W)
    for u in range(H):
        for v in range(W):
            out[u, v] = sum(Mh[u, i] * Mw[v, j] * x[i, j] for i in range(H) for j in range(W))
    return out


def test_psnr_examples(rng):
    a = rng.random((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    b = rng.random((8, 8, 3))
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / np.mean((a - b) ** 2)), abs=1e-12)
    with pytest.raises(ValueError):
        psnr(a, b[:4])


def test_ssim_examples(rng):
    a = rng.uniform(0.0, 0.4, (16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1 - a) < 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


@pytest.mark.parametrize("shape", [(11, 11, 3), (20, 31, 3), (24, 24)])
def test_ssim_matches_skimage(rng, shape):
    a, b = rng.random((2, *shape))
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=-1 if len(shape) == 3 else None)
    assert abs(ssim(a, b) - ref) < 1e-6


def test_depth_order_error_examples():
    assert depth_order_error([[1.0, 2.0, 3.0]]) == 0.0
    assert depth_order_error([[2.0, 1.0]]) == 1.0
    assert depth_order_error([[3.0, 1.0, 2.0, 0.5]]) == pytest.approx(2.0 + 1.5)
    # rays with fewer than two hits still count in the mean
    assert depth_order_error([[2.0, 1.0], [5.0], []]) == pytest.approx(1 / 3)
    assert depth_order_error([(np.array([2.0, 1.5]), np.array([0.1, 0.1]))]) == pytest.approx(0.5)
    assert depth_order_error([]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(0, 10), max_size=6), min_size=1, max_size=5))
def test_depth_order_error_zero_iff_sorted(seqs):
    eps = depth_order_error(seqs)
    assert eps >= 0
    assert (eps == 0) == all(all(s[i] <= s[i + 1] for i in range(len(s) - 1)) for s in seqs)


def test_depth_order_error_from_render_matches_logs():
    scene, cam = toys.order_swap_pair()
    out = render(scene, cam, SortConfig(mode="global-center"), record="log")
    assert depth_order_error(out) == pytest.approx(depth_order_error(out.blend_log()), abs=1e-15)


def test_dct2_examples():
    c = dct2(np.full((4, 6), 0.7))
    assert c[0, 0] == pytest.approx(0.7 * math.sqrt(24))
    assert np.abs(c.ravel()[1:]).max() < 1e-14
    imp = np.zeros((8, 8))
    imp[0, 0] = 1.0
    # closed form: c[u, v] = a(u) a(v) with a(0) = sqrt(1/n), a(k) = sqrt(2/n) cos(pi k / 2n)
    a = np.sqrt(2 / 8) * np.cos(np.pi * np.arange(8) / 16)
    a[0] = np.sqrt(1 / 8)
    np.testing.assert_allclose(dct2(imp), np.outer(a, a), atol=1e-15)


def test_dct2_matches_naive_and_roundtrips(rng):
    x = rng.random((7, 9))
    np.testing.assert_allclose(dct2(x), naive_dct2(x), atol=1e-12)
    np.testing.assert_allclose(idct2(dct2(x)), x, atol=1e-12)
    assert abs(np.linalg.norm(dct2(x)) - np.linalg.norm(x)) < 1e-9


def test_hf_fidelity_examples(rng):
    x = rng.random((16, 16, 3))
    assert hf_fidelity(x, x) == pytest.approx(1.0, abs=1e-12)
    assert hf_fidelity(x, 1 - x) == pytest.approx(-1.0, abs=1e-12)
    assert hf_fidelity(x + 0.3, x - 0.1) == pytest.approx(1.0, abs=1e-12)
    assert math.isnan(hf_fidelity(np.full((8, 8, 3), 0.5), x[:8, :8]))


def test_hf_fidelity_matches_naive_oracle(rng):
    a, b = rng.random((2, 6, 7, 3))
    ca = naive_dct2(a @ [0.299, 0.587, 0.114]).ravel()[1:]
    cb = naive_dct2(b @ [0.299, 0.587, 0.114]).ravel()[1:]
    expect = ca @ cb / (np.linalg.norm(ca) * np.linalg.norm(cb))
    assert abs(hf_fidelity(a, b) - expect) < 1e-9


def test_luminance_and_crop(rng):
    img = rng.random((6, 8, 3))
    np.testing.assert_allclose(luminance(img), 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2])
    assert crop(img, (2, 1, 3, 4)).shape == (4, 3, 3)
    np.testing.assert_array_equal(crop(img, (2, 1, 3, 4)), img[1:5, 2:5])
    with pytest.raises(ValueError):
        crop(img, (6, 0, 4, 2))


def test_metrics_report(rng):
    a, b = rng.random((2, 16, 16, 3))
    rep = metrics_report(a, b, (2, 2, 12, 12))
    assert rep.psnr == psnr(a[2:14, 2:14], b[2:14, 2:14])
    assert rep.order_error is None
    assert set(rep.to_dict()) == {"psnr", "ssim", "order_error", "hf_fidelity"}
    small = metrics_report(a[:6, :6], b[:6, :6])
    assert math.isnan(small.ssim)
