import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfelkit import toys
from surfelkit.projection import intersect, pixel_frustum_rays, pixel_ray
from surfelkit.sampling import (AVERAGE, CENTER, CENTER_WEIGHTED, CORNER, RULES, combine, frustum_density,
                                get_rule, quadrature_error_order, quadrature_errors, rule_integral)
from surfelkit.scene import Surfel


def test_rule_weights():
    assert (CENTER.center_weight, CENTER.corner_weight) == (1.0, 0.0)
    assert (AVERAGE.center_weight, AVERAGE.corner_weight) == (0.2, 0.2)
    assert (CORNER.center_weight, CORNER.corner_weight) == (0.0, 0.25)
    assert (CENTER_WEIGHTED.center_weight, CENTER_WEIGHTED.corner_weight) == (2 / 3, 1 / 12)
    for r in RULES.values():
        assert abs(r.center_weight + 4 * r.corner_weight - 1) < 1e-15
    assert get_rule("cweighted") is CENTER_WEIGHTED and get_rule("center-only") is CENTER
    with pytest.raises(KeyError):
        get_rule("median")


def tilted_surfel(rng, scale):
    tu, tv = toys.random_frames(rng, 1, facing=(0, 0, -1), max_tilt=0.8)
    return Surfel([rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 5.0], tu[0], tv[0],
                  scale, scale * rng.uniform(0.7, 1.3), 1.0, np.zeros((1, 3)))


def test_degenerate_frustum_returns_center_density(rng):
    cam = toys.default_camera(16, 16)
    s = tilted_surfel(rng, 0.2)
    for rule in RULES.values():
        g, hit = frustum_density(s, cam, 8.5, 8.5, rule, half_extent=0.0)
        assert g == hit.density


def test_large_surfel_limit():
    cam = toys.default_camera(16, 16)
    s = Surfel([0.01, -0.02, 5.0], [1, 0, 0], [0, 1, 0], 1e3, 1e3, 1.0, np.zeros((1, 3)))
    for rule in RULES.values():
        g, hit = frustum_density(s, cam, 8.5, 8.5, rule)
        assert abs(g - hit.density) < 1e-7


def test_center_miss_means_no_contribution():
    cam = toys.default_camera(16, 16)
    s = Surfel([0, 0, 5.0], [1, 0, 0], [0, 0, 1], 1.0, 1.0, 1.0, np.zeros((1, 3)))
    assert frustum_density(s, cam, 8.0, 8.0) == (0.0, None)


def stratified_mean_density(s, cam, px, py, n=16):
    offs = (np.arange(n) + 0.5) / n - 0.5
    vals = []
    for dx in offs:
        for dy in offs:
            hit = intersect(pixel_ray(cam, px + dx, py + dy), s, cam)
            vals.append(0.0 if hit is None else hit.density)
    return np.mean(vals)


def test_average_rule_vs_monte_carlo(rng):
    cam = toys.default_camera(16, 16)
    pixel_world = 5.0 / cam.fx
    checked = 0
    for _ in range(20):
        s = tilted_surfel(rng, 1.2 * pixel_world)
        px, py = 8.0 + rng.uniform(-0.3, 0.3), 8.0 + rng.uniform(-0.3, 0.3)
        g, hit = frustum_density(s, cam, px, py, AVERAGE)
        if hit is None:
            continue
        ref = stratified_mean_density(s, cam, px, py)
        assert abs(g - ref) <= 0.15 * ref
        checked += 1
    assert checked >= 10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sorted(RULES)))
def test_rule_is_convex_combination(seed, name):
    rng = np.random.default_rng(seed)
    cam = toys.default_camera(16, 16)
    s = tilted_surfel(rng, rng.uniform(0.005, 0.1))
    px, py = rng.uniform(6, 10, 2)
    g, hit = frustum_density(s, cam, px, py, name)
    if hit is None:
        return
    samples = [hit.density]
    for r in pixel_frustum_rays(cam, px, py)[1:]:
        h = intersect(r, s, cam)
        samples.append(0.0 if h is None else h.density)
    rule = get_rule(name)
    used = samples if rule.center_weight else samples[1:]
    used = used if rule.corner_weight else samples[:1]
    assert min(used) - 1e-12 <= g <= max(used) + 1e-12


def test_low_pass_monotone_in_frustum_size():
    cam = toys.default_camera(17, 17)
    s = Surfel([0, 0, 5.0], [1, 0, 0], [0, 1, 0], 0.05, 0.08, 1.0, np.zeros((1, 3)))
    for name in ("average", "corner", "cweighted"):
        prev = np.inf
        for h in np.linspace(0, 3, 13):
            g, _ = frustum_density(s, cam, 8.5, 8.5, name, half_extent=h)
            assert g <= prev + 1e-15
            prev = g


def test_combine_clamps():
    assert combine(AVERAGE, 1.0, np.ones(4)) == 1.0
    np.testing.assert_allclose(combine(CORNER, 0.3, np.array([0.1, 0.2, 0.3, 0.4])), 0.25)


def test_quadrature_exact_on_constants_and_odd_functions():
    const = lambda x, y: 3.0 + 0 * x
    for name in RULES:
        assert np.all(quadrature_errors(name, const, [1.0, 0.5]) < 1e-14)
    linear = lambda x, y: x + 0 * y
    for name in ("corner", "cweighted"):
        assert abs(rule_integral(get_rule(name), linear, 0.7)) < 1e-15


def test_quadrature_orders_exp():
    f = lambda x, y: np.exp(x + y)
    assert abs(quadrature_error_order("corner", f, 0.5) - 4.0) <= 0.4
    assert abs(quadrature_error_order("cweighted", f, 0.5) - 6.0) <= 0.6


@pytest.mark.parametrize("name, ratio", [("corner", 1 / 16), ("cweighted", 1 / 64)])
@pytest.mark.parametrize("f", [lambda x, y: np.exp(x + y), lambda x, y: np.cos(x) * np.exp(0.5 * y),
                               lambda x, y: 1 / (2 + x + 0.3 * y)])
def test_halving_ratios(name, ratio, f):
    errs = quadrature_errors(name, f, 0.4 / 2.0 ** np.arange(4))
    r = errs[1:] / errs[:-1]
    assert np.all(np.abs(r / ratio - 1) <= 0.3)
