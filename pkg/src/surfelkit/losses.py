"""Photometric and geometric losses with their adjoints.

Every ``*_terms`` function returns the loss value together with the gradient
with respect to its inputs, so the optimizer can chain them into the renderer's
backward pass without an autodiff framework.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .projection import camera_directions
from .scene import Camera

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # 11-tap window at sigma 1.5
SSIM_PAD = 5
L1_ZERO = 1e-12  # residuals this small count as exact matches in the L1 subgradient


@lru_cache(maxsize=64)
def _filter_matrix(n: int) -> np.ndarray:
    """Dense matrix of the 1D Gaussian window (reflect boundary) on length-``n`` signals."""
    m = gaussian_filter1d(np.eye(n), SSIM_SIGMA, axis=0, mode="reflect", truncate=SSIM_TRUNCATE)
    m.setflags(write=False)
    return m


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over the two leading axes of (H, W, C)."""
    Fy = _filter_matrix(x.shape[0])
    Fx = _filter_matrix(x.shape[1])
    return np.einsum("lk,ikc->ilc", Fx, np.einsum("ij,jkc->ikc", Fy, x))


def _blur_adjoint(g: np.ndarray) -> np.ndarray:
    Fy = _filter_matrix(g.shape[0])
    Fx = _filter_matrix(g.shape[1])
    return np.einsum("kl,ikc->ilc", Fx, np.einsum("ji,jkc->ikc", Fy, g))


def _as_hwc(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


@dataclass
class _SSIMParts:
    mu_a: np.ndarray
    mu_b: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray

    @property
    def map(self) -> np.ndarray:
        return self.A1 * self.A2 / (self.B1 * self.B2)


def _ssim_parts(a: np.ndarray, b: np.ndarray) -> _SSIMParts:
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a ** 2
    sbb = _blur(b * b) - mu_b ** 2
    sab = _blur(a * b) - mu_a * mu_b
    return _SSIMParts(mu_a, mu_b, 2 * mu_a * mu_b + SSIM_C1, 2 * sab + SSIM_C2,
                      mu_a ** 2 + mu_b ** 2 + SSIM_C1, saa + sbb + SSIM_C2)


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel, per-channel SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return _ssim_parts(a, b).map


def ssim_terms(a, b) -> tuple[float, np.ndarray]:
    """Mean of the full SSIM map and its gradient with respect to ``a``."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    p = _ssim_parts(a, b)
    S = p.map
    gS = 1.0 / S.size
    den = p.B1 * p.B2
    gA1 = gS * p.A2 / den
    gA2 = gS * p.A1 / den
    gB1 = -gS * S / p.B1
    gB2 = -gS * S / p.B2
    g_mu = 2 * p.mu_b * gA1 - 2 * p.mu_b * gA2 + 2 * p.mu_a * gB1 - 2 * p.mu_a * gB2
    ga = _blur_adjoint(g_mu) + 2 * a * _blur_adjoint(gB2) + 2 * b * _blur_adjoint(gA2)
    return float(S.mean()), ga


def loss_color_terms(render, reference, ssim_weight: float = 0.2) -> tuple[float, np.ndarray]:
    """``(1-w)*L1 + w*(1-SSIM)`` and its gradient with respect to ``render``."""
    a, b = _as_hwc(render), _as_hwc(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    l1 = np.abs(diff).mean()
    g = (1 - ssim_weight) * np.where(np.abs(diff) > L1_ZERO, np.sign(diff), 0.0) / diff.size
    value = (1 - ssim_weight) * l1
    if ssim_weight:
        s, gs = ssim_terms(a, b)
        value += ssim_weight * (1 - s)
        g = g - ssim_weight * gs
    return float(value), g.reshape(np.shape(render))


def loss_color(render, reference, ssim_weight: float = 0.2) -> float:
    return loss_color_terms(render, reference, ssim_weight)[0]


# --------------------------------------------------------------------------
# depth distortion
# --------------------------------------------------------------------------


def distortion_terms(z: np.ndarray, w: np.ndarray):
    """Per-row ``sum_{i != j} w_i w_j (z_i - z_j)^2`` over padded ``(P, M)`` rows.

    Padding entries must carry ``w = 0``.  Returns ``(per_row, dL/dw, dL/dz)``.
    """
    W = w.sum(axis=1, keepdims=True)
    safe = np.where(W > 0, W, 1.0)
    zbar = (w * z).sum(axis=1, keepdims=True) / safe
    dz = np.where(w > 0, z - zbar, 0.0)
    spread = (w * dz * dz).sum(axis=1, keepdims=True)
    per_row = 2 * W[:, 0] * spread[:, 0]
    gw = 2 * (W * dz * dz + spread)
    gz = 4 * w * W * dz
    return per_row, gw, gz


def loss_depth_distortion(blend_logs, n_pixels=None) -> float:
    """Pixel-mean of the ordered-pair depth distortion over per-ray ``(z, w)`` logs.

    Accepts :class:`~surfelkit.rasterizer.RenderBuffers` (recorded) or a list of
    ``(z, w)`` array pairs, one per pixel.
    """
    if hasattr(blend_logs, "records"):
        total = sum(distortion_terms(np.where(r.alive, r.z, 0.0), r.w)[0].sum()
                    for r in blend_logs.records)
        return float(total / blend_logs.depth.size)
    total = 0.0
    for z, w in blend_logs:
        z = np.asarray(z, float)
        w = np.asarray(w, float)
        if z.size > 1:
            total += distortion_terms(z[None], w[None])[0][0]
    n = len(blend_logs) if n_pixels is None else n_pixels
    return float(total / max(n, 1))


# --------------------------------------------------------------------------
# normal consistency
# --------------------------------------------------------------------------


@dataclass
class DepthNormals:
    """Normals of the back-projected normalized depth map (central differences)."""

    normals: np.ndarray  # (H, W, 3), zero where invalid
    valid: np.ndarray  # (H, W)
    # intermediates for the adjoint
    depth_bar: np.ndarray
    acc_ok: np.ndarray
    rays: np.ndarray
    a: np.ndarray
    b: np.ndarray
    m: np.ndarray
    m_norm: np.ndarray
    sign: np.ndarray


def depth_normals(depth, acc, cam: Camera, min_weight: float = 0.01) -> DepthNormals:
    """World-space surface normals from the depth map.

    The blended depth is first normalized by the accumulated weight so the
    back-projected points of a partly transparent plane stay on that plane.
    Pixels on the image border, with accumulated weight below ``min_weight``
    (at the pixel or a 4-neighbour), or with a degenerate cross product are
    marked invalid.
    """
    depth = np.asarray(depth, float)
    acc = np.asarray(acc, float)
    H, W = depth.shape
    acc_ok = acc >= min_weight
    dbar = np.where(acc_ok, depth / np.where(acc_ok, acc, 1.0), 0.0)
    ys, xs = np.mgrid[0:H, 0:W]
    rays = camera_directions(cam, xs + 0.5, ys + 0.5) @ cam.rotation  # camera z component 1
    X = cam.center + dbar[..., None] * rays
    normals = np.zeros((H, W, 3))
    valid = np.zeros((H, W), dtype=bool)
    a = np.zeros((H, W, 3))
    b = np.zeros((H, W, 3))
    m = np.zeros((H, W, 3))
    m_norm = np.ones((H, W))
    sign = np.ones((H, W))
    if H >= 3 and W >= 3:
        a[1:-1, 1:-1] = X[1:-1, 2:] - X[1:-1, :-2]
        b[1:-1, 1:-1] = X[2:, 1:-1] - X[:-2, 1:-1]
        m = np.cross(a, b)
        m_norm = np.linalg.norm(m, axis=-1)
        inner = np.zeros((H, W), dtype=bool)
        inner[1:-1, 1:-1] = (acc_ok[1:-1, 1:-1] & acc_ok[1:-1, 2:] & acc_ok[1:-1, :-2]
                             & acc_ok[2:, 1:-1] & acc_ok[:-2, 1:-1])
        valid = inner & (m_norm > 1e-12)
        m_norm = np.where(valid, m_norm, 1.0)
        unit = m / m_norm[..., None]
        sign = np.where(np.sum(unit * (X - cam.center), axis=-1) > 0, -1.0, 1.0)
        normals = np.where(valid[..., None], sign[..., None] * unit, 0.0)
    return DepthNormals(normals, valid, dbar, acc_ok, rays, a, b, m, m_norm, sign)


def normal_terms(depth, acc, normal, cam: Camera, min_weight: float = 0.01):
    """Pixel-mean of ``sum_i w_i (1 - n_i . N_d)`` and its adjoints.

    With ``N = sum_i w_i n_i`` and ``A = sum_i w_i`` the per-pixel loss is
    ``A - N . N_d``.  Returns ``(value, dL/dD, dL/dA, dL/dN)`` as per-pixel maps.
    """
    dn = depth_normals(depth, acc, cam, min_weight)
    H, W = dn.valid.shape
    inv = 1.0 / (H * W)
    normal = np.asarray(normal, float)
    ok = dn.valid
    value = float(np.sum(np.where(ok, acc - np.sum(normal * dn.normals, axis=-1), 0.0)) * inv)
    gN = np.where(ok[..., None], -dn.normals * inv, 0.0)
    gA = np.where(ok, inv, 0.0)
    gD = np.zeros((H, W))
    if ok.any():
        g_nd = np.where(ok[..., None], -normal * inv, 0.0)
        unit = dn.m / dn.m_norm[..., None]
        g_unit = dn.sign[..., None] * g_nd
        gm = (g_unit - unit * np.sum(unit * g_unit, axis=-1, keepdims=True)) / dn.m_norm[..., None]
        gm = np.where(ok[..., None], gm, 0.0)
        ga = np.cross(dn.b, gm)
        gb = np.cross(gm, dn.a)
        gX = np.zeros((H, W, 3))
        gX[1:-1, 2:] += ga[1:-1, 1:-1]
        gX[1:-1, :-2] -= ga[1:-1, 1:-1]
        gX[2:, 1:-1] += gb[1:-1, 1:-1]
        gX[:-2, 1:-1] -= gb[1:-1, 1:-1]
        g_dbar = np.sum(gX * dn.rays, axis=-1)
        safe = np.where(dn.acc_ok, acc, 1.0)
        gD = np.where(dn.acc_ok, g_dbar / safe, 0.0)
        gA = gA - np.where(dn.acc_ok, g_dbar * dn.depth_bar / safe, 0.0)
    return value, gD, gA, gN


def loss_normal(render, cam: Camera, min_weight: float = 0.01) -> float:
    """Normal-consistency loss of a recorded render."""
    return normal_terms(render.depth, render.accumulated, render.normal, cam, min_weight)[0]
