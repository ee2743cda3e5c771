import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from surfelkit import toys
from surfelkit.losses import (depth_normals, distortion_terms, loss_color, loss_color_terms,
                              loss_depth_distortion, loss_normal, normal_terms, ssim_map)
from surfelkit.rasterizer import render
from surfelkit.scene import Scene


def skimage_full_map(a, b):
    _, S = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=-1, full=True)
    return S


def test_loss_color_examples(rng):
    a = rng.random((16, 16, 3))
    assert loss_color(a, a) == 0.0
    assert loss_color(a, a + 0.1, ssim_weight=0.0) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        loss_color(a, a[:8])


def test_ssim_map_matches_skimage(rng):
    a, b = rng.random((2, 20, 24, 3))
    np.testing.assert_allclose(ssim_map(a, b), skimage_full_map(a, b), atol=1e-12)


def test_loss_color_matches_oracle(rng):
    a, b = rng.random((2, 18, 15, 3))
    w = 0.2
    expect = (1 - w) * np.abs(a - b).mean() + w * (1 - skimage_full_map(a, b).mean())
    assert loss_color(a, b, w) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("w", [0.0, 0.2, 1.0])
def test_loss_color_gradient(rng, w):
    a, b = rng.random((2, 9, 11, 3))
    _, g = loss_color_terms(a, b, w)
    eps = 1e-6
    for _ in range(25):
        idx = tuple(rng.integers(0, s) for s in a.shape)
        ap, am = a.copy(), a.copy()
        ap[idx] += eps
        am[idx] -= eps
        fd = (loss_color(ap, b, w) - loss_color(am, b, w)) / (2 * eps)
        assert abs(fd - g[idx]) < 1e-6


def test_distortion_examples():
    assert loss_depth_distortion([(np.array([2.0]), np.array([0.7]))]) == 0.0
    assert loss_depth_distortion([(np.array([1.0, 2.0]), np.array([0.5, 0.5]))]) == pytest.approx(0.5)
    assert loss_depth_distortion([(np.full(4, 3.0), np.full(4, 0.2))]) < 1e-20
    # pixel mean: one empty pixel halves it
    logs = [(np.array([1.0, 2.0]), np.array([0.5, 0.5])), (np.zeros(0), np.zeros(0))]
    assert loss_depth_distortion(logs) == pytest.approx(0.25)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_distortion_matches_double_sum(seed, m):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.5, 5, m)
    w = rng.uniform(0, 0.5, m)
    direct = sum(w[i] * w[j] * (z[i] - z[j]) ** 2 for i in range(m) for j in range(m) if i != j)
    val, gw, gz = distortion_terms(z[None], w[None])
    assert val[0] >= 0
    assert val[0] == pytest.approx(direct, abs=1e-12)
    eps = 1e-6
    for i in range(m):
        e = np.zeros(m)
        e[i] = eps
        fw = (distortion_terms(z[None], (w + e)[None])[0][0] - distortion_terms(z[None], (w - e)[None])[0][0]) / (2 * eps)
        fz = (distortion_terms((z + e)[None], w[None])[0][0] - distortion_terms((z - e)[None], w[None])[0][0]) / (2 * eps)
        assert abs(fw - gw[0, i]) < 1e-6
        assert abs(fz - gz[0, i]) < 1e-6


def test_distortion_from_render(rng):
    scene = toys.random_scene(rng, 6)
    out = render(scene, toys.default_camera(12, 12), record="log")
    logs = out.blend_log()
    assert loss_depth_distortion(out) == pytest.approx(loss_depth_distortion(logs), abs=1e-14)


def big_plane(depth=3.0, tilt=0.0):
    scene = toys.quad_scene(depth=depth, half=1.0, n_side=1)
    c, s = np.cos(tilt), np.sin(tilt)
    scene.tangent_u[0] = [c, 0, s]
    scene.scales[:] = 20.0
    scene.opacities[:] = 0.9
    return scene


def test_normal_loss_fronto_parallel_plane():
    cam = toys.default_camera(16, 16)
    out = render(big_plane(), cam, record="log")
    assert abs(loss_normal(out, cam)) < 1e-12


def test_normal_loss_orthogonal_normals():
    cam = toys.default_camera(10, 10)
    out = render(big_plane(), cam, record="log")
    w = 0.6
    acc = np.full((10, 10), w)
    depth = w * out.depth / out.accumulated
    normal = np.zeros((10, 10, 3))
    normal[..., 0] = w  # x axis is orthogonal to the plane normal
    value, *_ = normal_terms(depth, acc, normal, cam)
    dn = depth_normals(depth, acc, cam)
    assert dn.valid.sum() == 64
    assert value * 100 / 64 == pytest.approx(w, abs=1e-9)


def test_depth_normals_tilted_plane():
    cam = toys.default_camera(24, 24)
    scene = big_plane(tilt=0.5)
    out = render(scene, cam, record="log")
    dn = depth_normals(out.depth, out.accumulated, cam)
    n_true = scene.normals[0]
    n_true = n_true if n_true @ (scene.positions[0] - cam.center) < 0 else -n_true
    assert dn.valid.sum() > 300
    err = np.linalg.norm(dn.normals[dn.valid] - n_true, axis=-1)
    assert err.max() < 0.05


def test_normal_loss_range(rng):
    scene = toys.random_scene(rng, 8)
    cam = toys.default_camera(16, 16)
    out = render(scene, cam, record="log")
    value, *_ = normal_terms(out.depth, out.accumulated, out.normal, cam)
    assert 0.0 <= value <= 2 * out.accumulated.mean() + 1e-12


def test_normal_terms_adjoint(rng):
    H, W = 7, 8
    cam = toys.default_camera(W, H)
    acc = rng.uniform(0.3, 1.0, (H, W))
    depth = acc * rng.uniform(2.9, 3.1, (H, W))
    normal = acc[..., None] * np.array([0.1, -0.2, -1.0]) + rng.normal(scale=0.05, size=(H, W, 3))
    _, gD, gA, gN = normal_terms(depth, acc, normal, cam)
    f = lambda D, A, N: normal_terms(D, A, N, cam)[0]
    eps = 1e-6
    for _ in range(20):
        y, x, c = rng.integers(0, H), rng.integers(0, W), rng.integers(0, 3)
        d = np.zeros((H, W))
        d[y, x] = eps
        assert abs((f(depth + d, acc, normal) - f(depth - d, acc, normal)) / (2 * eps) - gD[y, x]) < 1e-6
        assert abs((f(depth, acc + d, normal) - f(depth, acc - d, normal)) / (2 * eps) - gA[y, x]) < 1e-6
        n = np.zeros((H, W, 3))
        n[y, x, c] = eps
        assert abs((f(depth, acc, normal + n) - f(depth, acc, normal - n)) / (2 * eps) - gN[y, x, c]) < 1e-6


def test_empty_render_losses():
    cam = toys.default_camera(8, 8)
    out = render(Scene.empty(), cam, record="log")
    assert loss_depth_distortion(out) == 0.0
    assert loss_normal(out, cam) == 0.0
