import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfelkit import toys
from surfelkit.fisher import (EPSILON_FLOOR, fisher_diag, fisher_diags, log_det_score, prune,
                              sensitivity_score)
from surfelkit.rasterizer import render
from surfelkit.scene import Dataset, Scene

from conftest import perturbed

FISHER_GROUPS = [("positions", 0), ("positions", 1), ("positions", 2), ("scales", 0), ("scales", 1)]


def fd_fisher(scene, dataset, i, eps=1e-6):
    """Squared central-difference image Jacobian summed over views, pixels and channels."""
    out = np.zeros(5)
    for k, (group, axis) in enumerate(FISHER_GROUPS):
        for view in dataset:
            hi = render(perturbed(scene, group, (i, axis), eps), view.camera).color
            lo = render(perturbed(scene, group, (i, axis), -eps), view.camera).color
            out[k] += np.sum(((hi - lo) / (2 * eps)) ** 2)
    return out


def three_surfel_setup(seed=0, textured=False):
    rng = np.random.default_rng(seed)
    scene = toys.random_scene(rng, 3, spread=0.5, scale=(0.2, 0.4))
    if textured:
        from conftest import add_random_textures
        add_random_textures(scene, rng)
    cams = toys.orbit_cameras(2, width=12, height=12)
    return scene, toys.render_dataset(scene, cams)


@pytest.mark.parametrize("textured", [False, True])
def test_fisher_diag_matches_finite_differences(textured):
    scene, ds = three_surfel_setup(textured=textured)
    diags = fisher_diags(scene, ds)
    for i in range(3):
        fd = fd_fisher(scene, ds, i)
        assert np.all(fd > 0)
        np.testing.assert_allclose(diags[i], fd, rtol=1e-3)
        np.testing.assert_array_equal(fisher_diag(scene, ds, i), diags[i])


def occluded_scene():
    """Surfel 1 in front of an opaque wall (surfel 0), surfel 2 hidden behind it."""
    rng = np.random.default_rng(1)
    scene = toys.random_scene(rng, 3, spread=0.3, scale=(0.15, 0.25))
    scene.positions[0] = [0, 0, 1.5]
    scene.tangent_u[0], scene.tangent_v[0] = [1, 0, 0], [0, 1, 0]
    scene.scales[0] = [1000.0, 1000.0]  # G ~ 1 everywhere, so rays terminate at the wall
    scene.opacities[0] = 1.0
    scene.positions[1] = [0.05, 0.05, 1.0]
    scene.positions[2] = [0.05, -0.05, 4.0]
    cam = toys.default_camera(16, 16)
    return scene, toys.render_dataset(scene, [cam])


def test_occluded_surfel_has_zero_diag():
    scene, ds = occluded_scene()
    diags = fisher_diags(scene, ds)
    np.testing.assert_array_equal(diags[2], 0.0)
    assert np.all(diags[1] > 0)


def test_duplicated_view_doubles_diag():
    scene, ds = three_surfel_setup(2)
    once = fisher_diags(scene, ds)
    twice = fisher_diags(scene, Dataset(list(ds.views) + list(ds.views)))
    np.testing.assert_allclose(twice, 2 * once, rtol=1e-12)


def test_adding_view_never_decreases():
    scene, ds = three_surfel_setup(3)
    extra = toys.render_dataset(scene, toys.orbit_cameras(3, width=12, height=12, spread_deg=33.0))
    a = fisher_diags(scene, ds)
    b = fisher_diags(scene, Dataset(list(ds.views) + list(extra.views)))
    assert np.all(b >= a)


def test_sensitivity_score_examples():
    assert sensitivity_score(np.ones(5), 1e-300) == 0.0
    assert sensitivity_score(np.full(5, np.e - EPSILON_FLOOR)) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        sensitivity_score(np.ones(5), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=5, max_size=5))
def test_scores_match_direct_formula(diag):
    direct = sum(abs(np.log(d + EPSILON_FLOOR)) for d in diag)
    assert sensitivity_score(diag) == pytest.approx(direct, rel=1e-12)
    assert log_det_score(diag) == pytest.approx(sum(np.log(d + EPSILON_FLOOR) for d in diag), rel=1e-12,
                                                abs=1e-12)
    assert np.isfinite(sensitivity_score(diag))


def test_prune_fraction_zero_and_errors():
    scene, ds = three_surfel_setup()
    same, rep = prune(scene, ds, 0.0)
    assert len(rep.removed) == 0
    np.testing.assert_array_equal(same.positions, scene.positions)
    for bad in (1.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            prune(scene, ds, bad)
    with pytest.raises(ValueError):
        prune(scene, ds, 0.1, criterion="median")


def test_prune_removes_invisible_first():
    scene, ds = occluded_scene()
    kept, rep = prune(scene, ds, 1 / 3)
    assert rep.removed.tolist() == [2]
    assert len(kept) == 2
    assert np.all(rep.diag >= 0) and np.all(np.isfinite(rep.scores))


def test_prune_counts_and_determinism():
    rng = np.random.default_rng(5)
    scene = toys.random_scene(rng, 25, spread=0.7)
    ds = toys.render_dataset(scene, toys.orbit_cameras(2, width=16, height=16))
    a, ra = prune(scene, ds, 0.1)
    b, rb = prune(scene, ds, 0.1)
    assert len(ra.removed) == 2 and len(a) == 23
    np.testing.assert_array_equal(ra.removed, rb.removed)
    np.testing.assert_array_equal(a.positions, b.positions)
    d = ra.to_dict()
    assert d["removed"] == ra.removed.tolist() and set(d["score_summary"]) == {"min", "p25", "median", "p75", "max"}


def test_prune_ties_broken_by_index():
    # identical invisible surfels: all scores tie, lowest indices go first
    scene = Scene(np.tile([0.0, 0.0, -5.0], (4, 1)), np.tile([1.0, 0, 0], (4, 1)), np.tile([0, 1.0, 0], (4, 1)),
                  np.full((4, 2), 0.2), np.full(4, 0.5), np.zeros((4, 1, 3)), sh_degree=0)
    ds = toys.render_dataset(scene, [toys.default_camera(8, 8)])
    _, rep = prune(scene, ds, 0.5)
    assert rep.removed.tolist() == [0, 1]
