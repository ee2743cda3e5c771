"""View-dependent color: real spherical harmonics plus per-surfel texture maps.

The shaded color of a hit is ``texture(u, v) + SH(d)`` where ``d`` is the exact
direction from the camera center to the hit point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .projection import Intersection
from .scene import DEFAULT_CUTOFF, Camera, Surfel, TextureMap

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

TEXTURE_MODES = ("additive", "replace_dc")


def sh_basis(d: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions ``d`` (..., 3) -> (..., (degree+1)^2)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * xz, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    if degree > 3:
        raise ValueError("SH degree above 3 is not supported")
    return np.stack(out, axis=-1)


def sh_eval(coeffs, d) -> np.ndarray:
    """Contract ``coeffs`` ((L+1)^2, 3) with the SH basis at direction ``d``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = int(round(math.sqrt(coeffs.shape[-2]))) - 1
    return np.einsum("...k,...kc->...c", sh_basis(d, degree), coeffs)


def view_direction(s: Surfel, hit: Intersection, cam: Camera) -> np.ndarray:
    """Unit direction from the camera center to the world point ``H(u, v, 1)``."""
    X = s.center + hit.u * s.scale_u * s.tangent_u + hit.v * s.scale_v * s.tangent_v
    d = X - cam.center
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise ValueError("hit point coincides with the camera center")
    return d / norm


def texture_size(scale: float, resolution: float, cap: int) -> int:
    return int(min(max(math.ceil(resolution * scale), 1), cap))


def texture_alloc(s: Surfel, resolution: float, cap: int = 64, init=(0.0, 0.0, 0.0),
                  cutoff: float = DEFAULT_CUTOFF) -> TextureMap:
    """Allocate a ``ceil(T*s_u) x ceil(T*s_v)`` texture (clamped to [1, cap]) filled with ``init``."""
    if resolution <= 0:
        raise ValueError("texture resolution must be positive")
    U = texture_size(s.scale_u, resolution, cap)
    V = texture_size(s.scale_v, resolution, cap)
    texels = np.broadcast_to(np.asarray(init, dtype=np.float64), (U, V, 3)).copy()
    return TextureMap(texels, resolution, cutoff)


def texture_uv(u, v, tex: TextureMap):
    """Continuous texel coordinates ``((u+r)/2r * U, (v+r)/2r * V)``, clamped to the texture."""
    r = tex.cutoff
    iu = np.clip((np.asarray(u) + r) / (2 * r), 0.0, 1.0) * tex.width
    iv = np.clip((np.asarray(v) + r) / (2 * r), 0.0, 1.0) * tex.height
    return iu, iv


def _bilinear_setup(iu, iv, U, V):
    x = np.asarray(iu, dtype=np.float64) - 0.5
    y = np.asarray(iv, dtype=np.float64) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    i0 = np.clip(x0, 0, U - 1)
    i1 = np.clip(x0 + 1, 0, U - 1)
    j0 = np.clip(y0, 0, V - 1)
    j1 = np.clip(y0 + 1, 0, V - 1)
    return i0, i1, j0, j1, fx, fy


def texture_sample(tex: TextureMap, iu, iv) -> np.ndarray:
    """Bilinear lookup, clamp-to-edge, texel centers at half-integer coordinates."""
    t = tex.texels
    i0, i1, j0, j1, fx, fy = _bilinear_setup(iu, iv, tex.width, tex.height)
    fx = np.asarray(fx)[..., None]
    fy = np.asarray(fy)[..., None]
    return ((1 - fx) * (1 - fy) * t[i0, j0] + fx * (1 - fy) * t[i1, j0]
            + (1 - fx) * fy * t[i0, j1] + fx * fy * t[i1, j1])


@dataclass
class ShadedColor:
    value: np.ndarray
    texture_term: np.ndarray
    sh_term: np.ndarray


def textured_color(s: Surfel, hit: Intersection, cam: Camera, mode: str = "additive") -> ShadedColor:
    d = view_direction(s, hit, cam)
    coeffs = s.sh.copy()
    if mode == "replace_dc" and s.texture is not None:
        coeffs[0] = 0.0
    sh_term = sh_eval(coeffs, d)
    if s.texture is None:
        tex_term = np.zeros(3)
    else:
        tex_term = texture_sample(s.texture, *texture_uv(hit.u, hit.v, s.texture))
    return ShadedColor(tex_term + sh_term, tex_term, sh_term)


class TexturePack:
    """All surfel textures flattened into one texel array for batched sampling.

    ``offset[i] == -1`` marks an untextured surfel.
    """

    def __init__(self, textures: list, cutoff: float = DEFAULT_CUTOFF):
        n = len(textures)
        self.offset = np.full(n, -1, dtype=np.int64)
        self.U = np.ones(n, dtype=np.int64)
        self.V = np.ones(n, dtype=np.int64)
        self.cutoff = np.full(n, cutoff)
        chunks = []
        pos = 0
        for i, t in enumerate(textures):
            if t is None:
                continue
            self.offset[i] = pos
            self.U[i], self.V[i] = t.width, t.height
            self.cutoff[i] = t.cutoff
            chunks.append(t.texels.reshape(-1, t.channels))
            pos += t.width * t.height
        self.texels = np.concatenate(chunks) if chunks else np.zeros((0, 3))
        self.any = bool(chunks)

    def has_texture(self, sid):
        return self.offset[sid] >= 0

    def lookup(self, sid, u, v):
        """Sample textures for flat arrays of hits.

        Returns ``(color (B,3), dcolor_du (B,3), dcolor_dv (B,3), corners)`` where
        ``corners`` = (flat texel indices (B,4), bilinear weights (B,4)) for
        scattering gradients.  Callers pass only textured hits.
        """
        U, V, r = self.U[sid], self.V[sid], self.cutoff[sid]
        su = (u + r) / (2 * r)
        sv = (v + r) / (2 * r)
        inside_u = (su > 0) & (su < 1)
        inside_v = (sv > 0) & (sv < 1)
        iu = np.clip(su, 0.0, 1.0) * U
        iv = np.clip(sv, 0.0, 1.0) * V
        i0, i1, j0, j1, fx, fy = _bilinear_setup(iu, iv, U, V)
        base = self.offset[sid]
        idx = np.stack([base + i0 * V + j0, base + i1 * V + j0,
                        base + i0 * V + j1, base + i1 * V + j1], axis=1)
        w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
        t = self.texels[idx]  # (B, 4, 3)
        color = np.einsum("bk,bkc->bc", w, t)
        dx = (1 - fy)[:, None] * (t[:, 1] - t[:, 0]) + fy[:, None] * (t[:, 3] - t[:, 2])
        dy = (1 - fx)[:, None] * (t[:, 2] - t[:, 0]) + fx[:, None] * (t[:, 3] - t[:, 1])
        du = dx * (inside_u * U / (2 * r))[:, None]
        dv = dy * (inside_v * V / (2 * r))[:, None]
        return color, du, dv, (idx, w)

    def split(self, flat: np.ndarray) -> list:
        """Inverse of the packing: per-surfel ``(U, V, 3)`` arrays (None when untextured)."""
        out = []
        for i in range(len(self.offset)):
            if self.offset[i] < 0:
                out.append(None)
            else:
                n = self.U[i] * self.V[i]
                out.append(flat[self.offset[i]:self.offset[i] + n].reshape(self.U[i], self.V[i], -1))
        return out
