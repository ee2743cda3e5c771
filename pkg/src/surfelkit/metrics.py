"""Image and rendering-quality metrics: PSNR, SSIM, depth-order error, DCT fidelity."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.fft import dctn, idctn

from .losses import SSIM_PAD, ssim_map

PSNR_CAP = 99.0
LUMA_601 = np.array([0.299, 0.587, 0.114])


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    order_error: Optional[float]
    hf_fidelity: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) excluding a 5-pixel border, channels averaged."""
    a, b = _check_shapes(a, b)
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("ssim needs images of at least 11x11 pixels")
    S = ssim_map(a, b)
    return float(S[SSIM_PAD:-SSIM_PAD, SSIM_PAD:-SSIM_PAD].mean())


def depth_order_error(blend_logs) -> float:
    """Sum of positive depth inversions along each ray's blend sequence, averaged over all rays.

    Accepts a recorded :class:`~surfelkit.rasterizer.RenderBuffers` or a list of
    per-ray depth sequences (or ``(z, w)`` pairs).  Rays with fewer than two
    blended hits count in the denominator with zero error.
    """
    if hasattr(blend_logs, "records"):
        total = 0.0
        for rec in blend_logs.records:
            z = rec.z
            both = rec.alive[:, :-1] & rec.alive[:, 1:]
            total += float(np.sum(np.where(both, np.clip(z[:, :-1] - z[:, 1:], 0.0, None), 0.0)))
        return total / blend_logs.depth.size
    seqs = [s[0] if isinstance(s, tuple) else s for s in blend_logs]
    if not seqs:
        return 0.0
    total = 0.0
    for z in seqs:
        z = np.asarray(z, dtype=np.float64)
        if z.size > 1:
            total += float(np.sum(np.clip(z[:-1] - z[1:], 0.0, None)))
    return total / len(seqs)


def dct2(x) -> np.ndarray:
    """Orthonormal 2D DCT-II."""
    return dctn(np.asarray(x, dtype=np.float64), type=2, norm="ortho")


def idct2(c) -> np.ndarray:
    return idctn(np.asarray(c, dtype=np.float64), type=2, norm="ortho")


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ LUMA_601


def crop(img, rect) -> np.ndarray:
    """``rect = (x, y, w, h)`` in pixels."""
    if rect is None:
        return img
    x, y, w, h = (int(v) for v in rect)
    if w <= 0 or h <= 0 or x < 0 or y < 0 or y + h > img.shape[0] or x + w > img.shape[1]:
        raise ValueError(f"crop {rect} outside image of shape {img.shape[:2]}")
    return img[y:y + h, x:x + w]


def hf_fidelity(rendered, reference) -> float:
    """Cosine similarity of the AC (non-DC) DCT coefficients of the two luminance images.

    Returns ``nan`` when either image has no AC energy.
    """
    a, b = _check_shapes(rendered, reference)
    ca = dct2(luminance(a)).ravel()[1:]
    cb = dct2(luminance(b)).ravel()[1:]
    na, nb = np.linalg.norm(ca), np.linalg.norm(cb)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.clip(ca @ cb / (na * nb), -1.0, 1.0))


def metrics_report(a, b, rect=None, blend_logs=None) -> MetricsReport:
    a, b = _check_shapes(a, b)
    a, b = crop(a, rect), crop(b, rect)
    s = ssim(a, b) if min(a.shape[:2]) >= 11 else float("nan")
    eps = depth_order_error(blend_logs) if blend_logs is not None else None
    return MetricsReport(psnr(a, b), s, eps, hf_fidelity(a, b))
