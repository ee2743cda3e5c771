"""Pixel-frustum density estimation and the 5-point quadrature rules behind it.

Every rule samples the surfel density at the pixel center and at the four
pixel corners and combines them as ``w_m*G_center + w_c*sum(G_corner)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .projection import Intersection, intersect, pixel_frustum_rays
from .scene import Camera, Surfel


@dataclass(frozen=True)
class QuadratureRule:
    name: str
    center_weight: float
    corner_weight: float

    def __post_init__(self):
        if abs(self.center_weight + 4 * self.corner_weight - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to one")

    @property
    def uses_corners(self) -> bool:
        return self.corner_weight != 0.0


CENTER = QuadratureRule("center-only", 1.0, 0.0)
AVERAGE = QuadratureRule("average", 0.2, 0.2)
CORNER = QuadratureRule("corner", 0.0, 0.25)
CENTER_WEIGHTED = QuadratureRule("center-weighted", 2.0 / 3.0, 1.0 / 12.0)

RULES = {
    "center": CENTER,
    "average": AVERAGE,
    "corner": CORNER,
    "cweighted": CENTER_WEIGHTED,
}


def get_rule(rule) -> QuadratureRule:
    if isinstance(rule, QuadratureRule):
        return rule
    for key, r in RULES.items():
        if rule in (key, r.name):
            return r
    raise KeyError(f"unknown quadrature rule {rule!r}; choose from {sorted(RULES)}")


def combine(rule: QuadratureRule, g_center, g_corners):
    """``w_m*G_center + w_c*sum(G_corners)`` clamped to [0, 1]; corners on the last axis."""
    g = rule.center_weight * np.asarray(g_center) + rule.corner_weight * np.sum(g_corners, axis=-1)
    return np.clip(g, 0.0, 1.0)


def frustum_density(s: Surfel, cam: Camera, px: float, py: float, rule=AVERAGE,
                    half_extent: float = 0.5) -> tuple[float, Optional[Intersection]]:
    """Weighted density of one surfel over the pixel frustum at ``(px, py)``.

    The four corner rays are intersected with the same surfel the center ray
    touched; a corner that misses the plane contributes zero.  Returns
    ``(0.0, None)`` when the center ray misses.
    """
    rule = get_rule(rule)
    rays = pixel_frustum_rays(cam, px, py, half_extent)
    center = intersect(rays[0], s, cam)
    if center is None:
        return 0.0, None
    corners = []
    for r in rays[1:]:
        hit = intersect(r, s, cam)
        corners.append(0.0 if hit is None else hit.density)
    return float(combine(rule, center.density, np.array(corners))), center


def rule_integral(rule: QuadratureRule, f: Callable, h: float, x0: float = 0.0, y0: float = 0.0) -> float:
    """Approximate the integral of ``f`` over the ``h x h`` square centered at ``(x0, y0)``."""
    c = h / 2
    corners = sum(f(x0 + i * c, y0 + j * c) for i in (-1, 1) for j in (-1, 1))
    return h * h * (rule.center_weight * f(x0, y0) + rule.corner_weight * corners)


def gauss_legendre_integral(f: Callable, h: float, x0: float = 0.0, y0: float = 0.0, n: int = 32) -> float:
    """Tensor-product Gauss-Legendre reference for the same square."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    xs = x0 + 0.5 * h * nodes
    ys = y0 + 0.5 * h * nodes
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return float(0.25 * h * h * np.einsum("i,j,ij->", weights, weights, f(X, Y)))


def quadrature_errors(rule, f: Callable, hs: Sequence[float], x0: float = 0.0, y0: float = 0.0) -> np.ndarray:
    rule = get_rule(rule)
    return np.array([abs(rule_integral(rule, f, h, x0, y0) - gauss_legendre_integral(f, h, x0, y0))
                     for h in hs])


def quadrature_error_order(rule, f: Callable, h: float, levels: int = 4,
                           x0: float = 0.0, y0: float = 0.0) -> float:
    """Observed convergence order: slope of log(error) vs log(h) over ``h, h/2, ...``.

    Returns ``inf`` when the rule is exact (zero error) on ``f``.
    """
    hs = h / 2.0 ** np.arange(levels)
    errs = quadrature_errors(rule, f, hs, x0, y0)
    if np.all(errs < 1e-15 * hs**2):
        return float("inf")
    slope, _ = np.polyfit(np.log(hs), np.log(errs), 1)
    return float(slope)
