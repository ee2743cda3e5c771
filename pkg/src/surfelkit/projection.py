"""Exact ray/surfel geometry.

A surfel spans the plane ``p + u*s_u*t_u + v*s_v*t_v``.  For a pixel ray we solve
for the plane point directly (no projected-covariance approximation), giving the
surfel-local coordinates ``(u, v)`` and the camera-space depth ``z``.

Besides the scalar reference API (:func:`intersect`, :func:`splat_to_world`) the
module provides array versions used by the rasterizer and the analytic Jacobian
of ``(u, v, z)`` with respect to the geometric parameters.  Geometric parameters
are ordered ``[p_x, p_y, p_z, spin, tilt_u, tilt_v, s_u, s_v]``, where the three
rotation entries are infinitesimal rotation angles about ``n``, ``t_u`` and
``t_v`` respectively.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .scene import Camera, Surfel

NEAR_PLANE = 0.01
PARALLEL_EPS = 1e-12
DENSITY_CUTOFF = 4.5

N_GEOM = 8  # p(3), rotation(3), s_u, s_v


@dataclass
class PixelRay:
    px: float
    py: float
    origin: np.ndarray
    direction: np.ndarray


@dataclass
class Intersection:
    u: float
    v: float
    z: float
    density: float
    surfel_index: int
    world_point: np.ndarray


def density(u, v):
    """Normalized surfel Gaussian ``exp(-(u^2 + v^2) / 2)``."""
    return np.exp(-0.5 * (np.square(u) + np.square(v)))


def splat_to_world(s: Surfel) -> np.ndarray:
    """4x4 ``H`` taking ``(u, v, 1, 1)`` to the homogeneous world point."""
    H = np.zeros((4, 4))
    H[:3, 0] = s.scale_u * s.tangent_u
    H[:3, 1] = s.scale_v * s.tangent_v
    H[:3, 3] = s.center
    H[3, 3] = 1.0
    return H


def camera_directions(cam: Camera, px, py) -> np.ndarray:
    """Unnormalized camera-space ray directions ``((px-cx)/fx, (py-cy)/fy, 1)``."""
    px, py = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float))
    return np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=-1)


def world_directions(cam: Camera, px, py) -> np.ndarray:
    """Unit world-space ray directions through image points ``(px, py)``."""
    d = camera_directions(cam, px, py) @ cam.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray(cam: Camera, px: float, py: float) -> PixelRay:
    return PixelRay(float(px), float(py), cam.center, world_directions(cam, px, py))


def pixel_frustum_rays(cam: Camera, px: float, py: float, half_extent: float = 0.5) -> list[PixelRay]:
    """Center ray followed by the four corner rays at ``(px +- h, py +- h)``.

    ``half_extent`` is in pixels; the default covers exactly one pixel.
    """
    offsets = [(0.0, 0.0)] + [(i * half_extent, j * half_extent) for i in (-1, 1) for j in (-1, 1)]
    return [pixel_ray(cam, px + dx, py + dy) for dx, dy in offsets]


def plane_hits(origin, dirs, dcz, pos, tu, tv, scales, near: float = NEAR_PLANE):
    """Intersect rays with surfel planes (broadcasting over leading dims).

    ``dirs``/``dcz`` carry a trailing surfel axis of length 1 or broadcast against
    ``pos``.  Returns ``(u, v, z, valid)``; invalid entries hold finite garbage.
    """
    n = np.cross(tu, tv)
    g = np.sum(n * dirs, axis=-1)
    ok = np.abs(g) >= PARALLEL_EPS
    gs = np.where(ok, g, 1.0)
    t = np.sum(n * (pos - origin), axis=-1) / gs
    q = origin + t[..., None] * dirs - pos
    u = np.sum(q * tu, axis=-1) / scales[..., 0]
    v = np.sum(q * tv, axis=-1) / scales[..., 1]
    z = t * dcz
    valid = ok & (z > near)
    return u, v, z, valid


def intersect(ray: PixelRay, s: Surfel, cam: Camera, index: int = 0,
              near: Optional[float] = None) -> Optional[Intersection]:
    """Exact ray/surfel intersection, or ``None`` on a miss."""
    near = cam.near if near is None else near
    n = np.cross(s.tangent_u, s.tangent_v)
    g = n @ ray.direction
    if abs(g) < PARALLEL_EPS:
        return None
    t = n @ (s.center - ray.origin) / g
    X = ray.origin + t * ray.direction
    z = t * (cam.rotation[2] @ ray.direction)
    if z <= near:
        return None
    q = X - s.center
    u = q @ s.tangent_u / s.scale_u
    v = q @ s.tangent_v / s.scale_v
    return Intersection(u, v, z, float(density(u, v)), index, X)


def hit_jacobian(origin, dirs, dcz, pos, tu, tv, scales):
    """Analytic ``d(u, v, z) / d(geometry)`` for a flat batch of ray/surfel hits.

    All inputs have a leading batch axis ``B``.  Returns ``(u, v, z, Ju, Jv, Jz)``
    with Jacobians of shape ``(B, 8)`` (parameter order in the module docstring).
    """
    n = np.cross(tu, tv)
    g = np.sum(n * dirs, axis=-1)
    t = np.sum(n * (pos - origin), axis=-1) / g
    q = origin + t[:, None] * dirs - pos
    su, sv = scales[:, 0], scales[:, 1]
    u = np.sum(q * tu, axis=-1) / su
    v = np.sum(q * tv, axis=-1) / sv
    z = t * dcz

    tur = np.sum(tu * dirs, axis=-1)
    tvr = np.sum(tv * dirs, axis=-1)
    nxq = np.cross(n, q)
    # d t / d p and d t / d omega (world rotation vector)
    dt_dp = n / g[:, None]
    dt_dw = -nxq / g[:, None]
    du_dp = (tur[:, None] * dt_dp - tu) / su[:, None]
    dv_dp = (tvr[:, None] * dt_dp - tv) / sv[:, None]
    du_dw = (np.cross(tu, q) + tur[:, None] * dt_dw) / su[:, None]
    dv_dw = (np.cross(tv, q) + tvr[:, None] * dt_dw) / sv[:, None]
    dz_dp = dcz[:, None] * dt_dp
    dz_dw = dcz[:, None] * dt_dw

    axes = np.stack([n, tu, tv], axis=1)  # (B, 3 axes, 3)

    def local(dw):
        return np.einsum("bk,bak->ba", dw, axes)

    B = len(u)
    Ju = np.zeros((B, N_GEOM))
    Jv = np.zeros((B, N_GEOM))
    Jz = np.zeros((B, N_GEOM))
    Ju[:, 0:3], Ju[:, 3:6], Ju[:, 6] = du_dp, local(du_dw), -u / su
    Jv[:, 0:3], Jv[:, 3:6], Jv[:, 7] = dv_dp, local(dv_dw), -v / sv
    Jz[:, 0:3], Jz[:, 3:6] = dz_dp, local(dz_dw)
    return u, v, z, Ju, Jv, Jz


def rotate_frames(tu, tv, local_angles):
    """Rotate tangent frames by ``spin*n + tilt_u*t_u + tilt_v*t_v`` (Rodrigues)."""
    tu = np.atleast_2d(tu)
    tv = np.atleast_2d(tv)
    a = np.atleast_2d(local_angles)
    n = np.cross(tu, tv)
    w = a[:, 0:1] * n + a[:, 1:2] * tu + a[:, 2:3] * tv
    theta = np.linalg.norm(w, axis=1, keepdims=True)
    safe = np.where(theta > 0, theta, 1.0)
    k = w / safe

    def rot(x):
        c, s = np.cos(theta), np.sin(theta)
        return x * c + np.cross(k, x) * s + k * np.sum(k * x, axis=1, keepdims=True) * (1 - c)

    return rot(tu), rot(tv)
