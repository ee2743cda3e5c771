"""Tile-based forward renderer with per-tile sorting and per-ray k-buffer ordering.

Pipeline for one camera:

1. ``bin_surfels`` assigns every surfel to the 8x8 tiles its cutoff support can
   touch (conservative bound on the projected support parallelogram).
2. ``per_tile_sort`` orders each tile's list by the depth at which the tile's
   center ray meets the surfel plane (``global-center`` mode instead uses one
   per-view order of surfel center depths, the classic splatting behaviour).
3. Every pixel consumes its tile's stream through a k-buffer
   (``kbuffer_order``) and alpha-blends the emitted hits front to back.

Pixels are processed in batches of tiles with fully vectorized numpy code; a
pixel only falls back to the Python k-buffer when it has more than ``k`` hits,
otherwise the k-buffer output is exactly the stable depth sort.
"""
from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .appearance import TexturePack, sh_basis
from .projection import DENSITY_CUTOFF, camera_directions, plane_hits
from .sampling import AVERAGE, QuadratureRule, combine, get_rule
from .scene import Camera, Scene

SORT_MODES = ("per-ray-k", "global-center")


@dataclass
class SortConfig:
    tile_size: int = 8
    k: int = 24
    mode: str = "per-ray-k"
    t_min: float = 1e-4

    def __post_init__(self):
        if self.tile_size < 1 or self.k < 1:
            raise ValueError("tile_size and k must be >= 1")
        aliases = {"kray": "per-ray-k", "global": "global-center"}
        self.mode = aliases.get(self.mode, self.mode)
        if self.mode not in SORT_MODES:
            raise ValueError(f"unknown sort mode {self.mode!r}")


@dataclass
class BatchRecord:
    """Blended hits of a batch of pixels in padded ``(P, M)`` layout (emission order)."""

    pix: np.ndarray
    alive: np.ndarray
    sid: np.ndarray
    z: np.ndarray
    w: np.ndarray
    # populated for record="full"
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    g_center: Optional[np.ndarray] = None
    g_hat: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    T: Optional[np.ndarray] = None
    uc: Optional[np.ndarray] = None
    vc: Optional[np.ndarray] = None
    g_corner: Optional[np.ndarray] = None
    corner_valid: Optional[np.ndarray] = None
    color: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    textured: Optional[np.ndarray] = None
    dirs: Optional[np.ndarray] = None  # (P, 5, 3) center then corners
    dcz: Optional[np.ndarray] = None  # (P, 5)
    sh_y: Optional[np.ndarray] = None  # (P, K)
    t_final: Optional[np.ndarray] = None


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3), background composited
    depth: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3)
    final_transmittance: np.ndarray  # (H, W)
    records: list = field(default_factory=list)
    camera: Optional[Camera] = None
    rule: QuadratureRule = AVERAGE
    sort: Optional[SortConfig] = None

    @property
    def accumulated(self) -> np.ndarray:
        """Per-pixel sum of blend weights."""
        acc = np.zeros(self.depth.size)
        for rec in self.records:
            acc[rec.pix] = rec.w.sum(axis=1)
        return acc.reshape(self.depth.shape)

    def blend_log(self) -> list:
        """Per-pixel list of ``(z, weight)`` arrays in blend order (row-major pixels)."""
        if not self.records and self.depth.size:
            raise ValueError("render was not recorded; pass record='log' or 'full'")
        out = [(np.zeros(0), np.zeros(0))] * self.depth.size
        for rec in self.records:
            for row, p in enumerate(rec.pix):
                m = rec.alive[row]
                out[p] = (rec.z[row][m], rec.w[row][m])
        return out


def support_corners(scene: Scene, cutoff: float = DENSITY_CUTOFF) -> np.ndarray:
    """World corners of the ``|u|,|v| <= cutoff`` parallelogram, shape (N, 4, 3)."""
    a = cutoff * scene.scales[:, 0:1] * scene.tangent_u
    b = cutoff * scene.scales[:, 1:2] * scene.tangent_v
    p = scene.positions
    return np.stack([p - a - b, p + a - b, p - a + b, p + a + b], axis=1)


def tile_grid(cam: Camera, tile_size: int) -> tuple[int, int]:
    return -(-cam.width // tile_size), -(-cam.height // tile_size)


def bin_surfels(scene: Scene, cam: Camera, tile_size: int = 8,
                cutoff: float = DENSITY_CUTOFF) -> list:
    """Per-tile arrays of surfel indices (ascending), tiles in row-major order."""
    ntx, nty = tile_grid(cam, tile_size)
    n_tiles = ntx * nty
    if len(scene) == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(n_tiles)]
    pts, zc = cam.project(support_corners(scene, cutoff))
    front = zc > cam.near
    none_front = ~front.any(axis=1)
    partial = front.any(axis=1) & ~front.all(axis=1)
    with np.errstate(invalid="ignore"):
        lo = np.where(front[..., None], pts, np.inf).min(axis=1)
        hi = np.where(front[..., None], pts, -np.inf).max(axis=1)
    # pixel centers sit at i + 0.5; tile columns covering [lo, hi]
    tx0 = np.floor((lo[:, 0] - 0.5) / tile_size)
    tx1 = np.floor((hi[:, 0] - 0.5) / tile_size)
    ty0 = np.floor((lo[:, 1] - 0.5) / tile_size)
    ty1 = np.floor((hi[:, 1] - 0.5) / tile_size)
    tx0[partial], ty0[partial] = 0, 0
    tx1[partial], ty1[partial] = ntx - 1, nty - 1
    tx0 = np.clip(tx0, 0, ntx - 1)
    ty0 = np.clip(ty0, 0, nty - 1)
    tx1 = np.clip(tx1, -1, ntx - 1)
    ty1 = np.clip(ty1, -1, nty - 1)
    off_screen = (hi[:, 0] < 0) | (lo[:, 0] > cam.width) | (hi[:, 1] < 0) | (lo[:, 1] > cam.height)
    skip = none_front | (off_screen & ~partial)
    ids, tiles = [], []
    for i in np.nonzero(~skip)[0]:
        xs = np.arange(int(tx0[i]), int(tx1[i]) + 1)
        ys = np.arange(int(ty0[i]), int(ty1[i]) + 1)
        if xs.size == 0 or ys.size == 0:
            continue
        t = (ys[:, None] * ntx + xs[None, :]).ravel()
        tiles.append(t)
        ids.append(np.full(t.size, i, dtype=np.int64))
    if not tiles:
        return [np.zeros(0, dtype=np.int64) for _ in range(n_tiles)]
    tiles = np.concatenate(tiles)
    ids = np.concatenate(ids)
    order = np.lexsort((ids, tiles))
    tiles, ids = tiles[order], ids[order]
    bounds = np.searchsorted(tiles, np.arange(n_tiles + 1))
    return [ids[bounds[t]:bounds[t + 1]] for t in range(n_tiles)]


def tile_bounds(cam: Camera, tile: int, tile_size: int) -> tuple[int, int, int, int]:
    ntx, _ = tile_grid(cam, tile_size)
    tx, ty = tile % ntx, tile // ntx
    x0, y0 = tx * tile_size, ty * tile_size
    return x0, y0, min(x0 + tile_size, cam.width), min(y0 + tile_size, cam.height)


def center_depths(scene: Scene, cam: Camera, idx=None) -> np.ndarray:
    p = scene.positions if idx is None else scene.positions[idx]
    return p @ cam.rotation[2] + cam.translation[2]


def quantize_depth(z: np.ndarray) -> np.ndarray:
    """Map depths onto 32-bit radix keys preserving order."""
    if z.size == 0:
        return z.astype(np.uint32)
    lo, hi = z.min(), z.max()
    span = hi - lo
    if span <= 0:
        return np.zeros(z.shape, dtype=np.uint32)
    return np.floor((z - lo) / span * 4294967295.0).astype(np.uint32)


def per_tile_sort(surfels: np.ndarray, scene: Scene, cam: Camera, tile: int, tile_size: int = 8) -> np.ndarray:
    """Order a tile's surfels by plane depth along the tile's center-pixel ray.

    Surfels whose plane the center ray misses fall back to their center depth.
    Ties are broken by surfel index.
    """
    surfels = np.asarray(surfels, dtype=np.int64)
    if surfels.size <= 1:
        return surfels
    x0, y0, x1, y1 = tile_bounds(cam, tile, tile_size)
    d_cam = camera_directions(cam, 0.5 * (x0 + x1), 0.5 * (y0 + y1))
    d = d_cam @ cam.rotation
    d = d / np.linalg.norm(d)
    dcz = d @ cam.rotation[2]
    sc = np.ones((surfels.size, 2))
    _, _, z, ok = plane_hits(cam.center, d, dcz, scene.positions[surfels],
                             scene.tangent_u[surfels], scene.tangent_v[surfels], sc, cam.near)
    z = np.where(ok, z, center_depths(scene, cam, surfels))
    order = np.lexsort((surfels, quantize_depth(z)))
    return surfels[order]


def kbuffer_order(z: Sequence[float], k: int) -> list:
    """Emission order of a depth stream through a k-entry sorting buffer.

    Each arrival is inserted into the buffer; once the buffer holds more than
    ``k`` entries the nearest is emitted.  Remaining entries flush in depth order.
    Equal depths keep stream order.
    """
    heap: list = []
    out = []
    for seq, zi in enumerate(z):
        heapq.heappush(heap, (float(zi), seq))
        if len(heap) > k:
            out.append(heapq.heappop(heap)[1])
    while heap:
        out.append(heapq.heappop(heap)[1])
    return out


@dataclass
class BlendResult:
    order: list
    weights: list
    final_transmittance: float


def kbuffer_blend(hits: Iterable, k: int, alpha_of: Callable, t_min: float = 1e-4,
                  depth_of: Callable = lambda h: h.z) -> BlendResult:
    """Reference per-ray k-buffer blending over a stream of hits.

    ``alpha_of(hit)`` gives the effective alpha ``opacity * density``.  Blending
    stops once transmittance falls below ``t_min``.
    """
    hits = list(hits)
    order, weights = [], []
    T = 1.0
    for i in kbuffer_order([depth_of(h) for h in hits], k):
        if T < t_min:
            break
        a = alpha_of(hits[i])
        order.append(hits[i])
        weights.append(a * T)
        T *= 1.0 - a
    return BlendResult(order, weights, T)


# --------------------------------------------------------------------------
# batched forward pass
# --------------------------------------------------------------------------


@dataclass
class _Prepared:
    scene: Scene
    cam: Camera
    normals: np.ndarray
    texpack: TexturePack
    rule: QuadratureRule
    sort: SortConfig
    half_extent: float
    cutoff: float
    texture_mode: str
    record: str


def _pixel_dirs(cam: Camera, px: np.ndarray, py: np.ndarray, half: float, corners: bool):
    pts = [(px, py)]
    if corners:
        pts += [(px + i * half, py + j * half) for i in (-1, 1) for j in (-1, 1)]
    dc = np.stack([camera_directions(cam, x, y) for x, y in pts], axis=1)  # (P, S, 3)
    dw = dc @ cam.rotation
    dw /= np.linalg.norm(dw, axis=-1, keepdims=True)
    dcz = dw @ cam.rotation[2]
    return dw, dcz


def _render_batch(prep: _Prepared, pix: np.ndarray, cand: np.ndarray):
    scene, cam, sort, rule = prep.scene, prep.cam, prep.sort, prep.rule
    P, S = cand.shape
    W = cam.width
    px = (pix % W) + 0.5
    py = (pix // W) + 0.5
    use_corners = rule.uses_corners or prep.record == "full"
    dirs, dcz = _pixel_dirs(cam, px, py, prep.half_extent, use_corners)
    O = cam.center

    present = cand >= 0
    c = np.where(present, cand, 0)
    pos, tu, tv = scene.positions[c], scene.tangent_u[c], scene.tangent_v[c]
    sc = scene.scales[c]
    u, v, z, valid = plane_hits(O, dirs[:, None, 0], dcz[:, None, 0], pos, tu, tv, sc, cam.near)
    valid &= present & (u * u + v * v <= prep.cutoff ** 2)

    count = valid.sum(axis=1)
    M = int(count.max()) if P else 0
    if sort.mode == "global-center":
        key = np.where(valid, np.arange(S)[None, :], S)
        order = np.argsort(key, axis=1, kind="stable")
    else:
        order = np.argsort(np.where(valid, z, np.inf), axis=1, kind="stable")
        for p in np.nonzero(count > sort.k)[0]:
            cols = np.nonzero(valid[p])[0]
            order[p, :cols.size] = cols[kbuffer_order(z[p, cols], sort.k)]
    order = order[:, :M]
    slot_ok = np.arange(M)[None, :] < count[:, None]
    rows = np.arange(P)[:, None]
    sid = np.where(slot_ok, c[rows, order], -1)
    sidc = np.where(slot_ok, sid, 0)
    z, u, v = z[rows, order], u[rows, order], v[rows, order]

    g0 = np.exp(-0.5 * (u * u + v * v))
    uc = vc = gc = cvalid = None
    if use_corners and M:
        uc, vc, zc, cvalid = plane_hits(
            O, dirs[:, None, 1:], dcz[:, None, 1:],
            scene.positions[sidc][:, :, None], scene.tangent_u[sidc][:, :, None],
            scene.tangent_v[sidc][:, :, None], scene.scales[sidc][:, :, None], cam.near)
        cvalid &= slot_ok[..., None]
        gc = np.where(cvalid, np.exp(-0.5 * (uc * uc + vc * vc)), 0.0)
        g_hat = combine(rule, g0, gc)
    else:
        g_hat = g0
    g_hat = np.where(slot_ok, g_hat, 0.0)

    a = scene.opacities[sidc] * g_hat
    one_minus = 1.0 - a
    T = np.ones((P, M))
    if M > 1:
        T[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    alive = slot_ok & (T >= sort.t_min)
    w = np.where(alive, a * T, 0.0)
    t_final = np.prod(np.where(alive, one_minus, 1.0), axis=1)

    # shading on alive hits only
    rr, mm = np.nonzero(alive)
    s_flat = sid[rr, mm]
    d_center = dirs[:, 0]
    Y = sh_basis(d_center, scene.sh_degree)
    coeffs = scene.sh[s_flat]
    textured = np.zeros((P, M), dtype=bool)
    tex_flat = prep.texpack.has_texture(s_flat) if prep.texpack.any else np.zeros(s_flat.size, bool)
    if prep.texture_mode == "replace_dc" and tex_flat.any():
        coeffs = coeffs.copy()
        coeffs[tex_flat, 0] = 0.0
    col = np.einsum("bk,bkc->bc", Y[rr], coeffs)
    if tex_flat.any():
        hit = np.nonzero(tex_flat)[0]
        tcol, _, _, _ = prep.texpack.lookup(s_flat[hit], u[rr[hit], mm[hit]], v[rr[hit], mm[hit]])
        col[hit] += tcol
        textured[rr[hit], mm[hit]] = True
    nrm = prep.normals[s_flat]
    flip = np.sum(nrm * d_center[rr], axis=1) > 0
    nrm = np.where(flip[:, None], -nrm, nrm)

    wf = w[rr, mm]

    def pixel_sum(vals):
        return np.bincount(rr, vals, minlength=P).astype(np.float64, copy=False)

    color = np.stack([pixel_sum(wf * col[:, ch]) for ch in range(3)], axis=1)
    color += t_final[:, None] * scene.background
    depth = pixel_sum(wf * z[rr, mm])
    normal = np.stack([pixel_sum(wf * nrm[:, ch]) for ch in range(3)], axis=1)

    rec = None
    if prep.record in ("log", "full"):
        rec = BatchRecord(pix=pix, alive=alive, sid=np.where(alive, sid, -1), z=z, w=w)
        if prep.record == "full":
            col_pad = np.zeros((P, M, 3))
            col_pad[rr, mm] = col
            nrm_pad = np.zeros((P, M, 3))
            nrm_pad[rr, mm] = nrm
            rec.u, rec.v, rec.g_center, rec.g_hat, rec.a, rec.T = u, v, g0, g_hat, a, T
            rec.uc, rec.vc, rec.g_corner, rec.corner_valid = uc, vc, gc, cvalid
            rec.color, rec.normal, rec.textured = col_pad, nrm_pad, textured
            rec.dirs, rec.dcz, rec.sh_y, rec.t_final = dirs, dcz, Y, t_final
    return pix, color, depth, normal, t_final, rec


def _batches(tiles: list, cam: Camera, tile_size: int, batch_pixels: int):
    """Group non-empty tiles into pixel batches with candidate matrices."""
    batch_pix, batch_lists = [], []
    n_pix = 0
    for t, lst in enumerate(tiles):
        if lst.size == 0:
            continue
        x0, y0, x1, y1 = tile_bounds(cam, t, tile_size)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        p = (ys * cam.width + xs).ravel()
        if n_pix + p.size > batch_pixels and batch_pix:
            yield _assemble(batch_pix, batch_lists)
            batch_pix, batch_lists, n_pix = [], [], 0
        batch_pix.append(p)
        batch_lists.append(lst)
        n_pix += p.size
    if batch_pix:
        yield _assemble(batch_pix, batch_lists)


def _assemble(pix_groups, lists):
    S = max(l.size for l in lists)
    P = sum(p.size for p in pix_groups)
    cand = np.full((P, S), -1, dtype=np.int64)
    row = 0
    for p, l in zip(pix_groups, lists):
        cand[row:row + p.size, :l.size] = l
        row += p.size
    return np.concatenate(pix_groups), cand


def render(scene: Scene, cam: Camera, sort: Optional[SortConfig] = None, rule=AVERAGE, *,
           record: str = "none", half_extent: float = 0.5, cutoff: float = DENSITY_CUTOFF,
           texture_mode: str = "additive", batch_pixels: int = 2048,
           threads: Optional[int] = None) -> RenderBuffers:
    """Render color, expected depth and normal maps of ``scene`` seen by ``cam``.

    ``record`` is ``"none"``, ``"log"`` (per-ray depths/weights for losses and
    metrics) or ``"full"`` (everything the backward pass needs).
    """
    sort = sort or SortConfig()
    rule = get_rule(rule)
    H, W = cam.height, cam.width
    color = np.tile(scene.background, (H * W, 1)).astype(np.float64)
    depth = np.zeros(H * W)
    normal = np.zeros((H * W, 3))
    t_final = np.ones(H * W)
    out = RenderBuffers(color, depth, normal, t_final, [], cam, rule, sort)
    if len(scene):
        prep = _Prepared(scene, cam, scene.normals, TexturePack(scene.textures, cutoff), rule, sort,
                         half_extent, cutoff, texture_mode, record)
        tiles = bin_surfels(scene, cam, sort.tile_size, cutoff)
        if sort.mode == "global-center":
            rank = np.empty(len(scene), dtype=np.int64)
            rank[np.lexsort((np.arange(len(scene)), center_depths(scene, cam)))] = np.arange(len(scene))
            tiles = [l[np.argsort(rank[l], kind="stable")] for l in tiles]
        else:
            tiles = [per_tile_sort(l, scene, cam, t, sort.tile_size) for t, l in enumerate(tiles)]
        jobs = list(_batches(tiles, cam, sort.tile_size, batch_pixels))
        if threads and threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(lambda j: _render_batch(prep, *j), jobs))
        else:
            results = [_render_batch(prep, *j) for j in jobs]
        for pix, c, d, n, tf, rec in results:
            color[pix], depth[pix], normal[pix], t_final[pix] = c, d, n, tf
            if rec is not None:
                out.records.append(rec)
    out.color = color.reshape(H, W, 3)
    out.depth = depth.reshape(H, W)
    out.normal = normal.reshape(H, W, 3)
    out.final_transmittance = t_final.reshape(H, W)
    return out
