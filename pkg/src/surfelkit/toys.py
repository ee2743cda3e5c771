"""Small synthetic scenes used by the tests, the CLI demos and the benchmarks."""
from __future__ import annotations

import numpy as np

from .appearance import SH_C0
from .scene import Camera, Dataset, Scene, View, num_sh_coeffs


def rgb_to_sh_dc(rgb) -> np.ndarray:
    """DC coefficient that evaluates to ``rgb`` in every direction."""
    return np.asarray(rgb, dtype=np.float64) / SH_C0


def random_frames(rng: np.random.Generator, n: int, facing=None, max_tilt: float = 1.0):
    """Random orthonormal tangent frames; with ``facing`` the normal stays within
    ``max_tilt`` radians of that direction."""
    if facing is None:
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(n, 3))
    else:
        f = np.asarray(facing, dtype=np.float64)
        f = f / np.linalg.norm(f)
        helper = np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(f, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(f, e1)
        tilt = rng.uniform(0, max_tilt, n)
        az = rng.uniform(0, 2 * np.pi, n)
        nrm = (np.cos(tilt)[:, None] * f + np.sin(tilt)[:, None]
               * (np.cos(az)[:, None] * e1 + np.sin(az)[:, None] * e2))
        spin = rng.uniform(0, 2 * np.pi, n)
        ref = np.where(np.abs(nrm[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        a = np.cross(nrm, ref)
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        c = np.cross(nrm, a)
        a, b = (np.cos(spin)[:, None] * a + np.sin(spin)[:, None] * c,
                -np.sin(spin)[:, None] * a + np.cos(spin)[:, None] * c)
        return a, b
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b -= np.sum(a * b, axis=1, keepdims=True) * a
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return a, b


def random_scene(rng: np.random.Generator, n: int = 5, sh_degree: int = 1, spread: float = 0.6,
                 depth=(2.5, 4.0), scale=(0.15, 0.5), opacity=(0.3, 0.9),
                 background=(0.1, 0.2, 0.3)) -> Scene:
    """Surfels scattered in front of the default camera (looking down +z from the origin)."""
    pos = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                           rng.uniform(*depth, n)])
    tu, tv = random_frames(rng, n, facing=(0.0, 0.0, -1.0), max_tilt=1.0)
    sh = rng.normal(scale=0.3, size=(n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0] += rgb_to_sh_dc(rng.uniform(0.2, 0.8, (n, 3)))
    return Scene(pos, tu, tv, rng.uniform(*scale, (n, 2)), rng.uniform(*opacity, n), sh,
                 background=np.asarray(background, float), sh_degree=sh_degree)


def default_camera(width: int = 32, height: int = 32, fov_deg: float = 40.0,
                   eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0)) -> Camera:
    return Camera.look_at(eye, target, up=(0.0, -1.0, 0.0), fov_deg=fov_deg, width=width, height=height)


def orbit_cameras(n: int, radius: float = 3.0, target=(0.0, 0.0, 3.0), width: int = 32,
                  height: int = 32, fov_deg: float = 40.0, spread_deg: float = 20.0) -> list:
    """Cameras on a small arc in front of ``target``, all looking at it."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    angles = np.radians(np.linspace(-spread_deg, spread_deg, n)) if n > 1 else [0.0]
    for i, a in enumerate(angles):
        el = np.radians(8.0) * (1 if i % 2 else -1) if n > 2 else 0.0
        eye = target + radius * np.array([np.sin(a) * np.cos(el), np.sin(el), -np.cos(a) * np.cos(el)])
        cams.append(Camera.look_at(eye, target, up=(0.0, -1.0, 0.0), fov_deg=fov_deg,
                                   width=width, height=height))
    return cams


def order_swap_pair() -> tuple[Scene, Camera]:
    """Two surfels whose center depths disagree with their depths along the central ray.

    Surfel 0 is a large tilted surfel whose center lies far behind (z=3) but whose
    plane crosses the optical axis at z=1.5.  Surfel 1 is fronto-parallel at z=2.
    Sorting by center depth blends surfel 1 first; the correct per-ray order is
    surfel 0 (z=1.5) then surfel 1 (z=2).
    """
    tu0 = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
    pos = np.array([[1.5, 0.0, 3.0], [0.0, 0.0, 2.0]])
    tu = np.stack([tu0, [1.0, 0.0, 0.0]])
    tv = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    scales = np.array([[2.0, 1.0], [0.6, 0.6]])
    sh = np.zeros((2, 1, 3))
    sh[0, 0] = rgb_to_sh_dc([0.9, 0.2, 0.1])
    sh[1, 0] = rgb_to_sh_dc([0.1, 0.3, 0.9])
    scene = Scene(pos, tu, tv, scales, np.array([0.5, 0.5]), sh, sh_degree=0)
    return scene, default_camera(16, 16, fov_deg=30.0)


def checkerboard_plane(nx: int = 32, ny: int = 16, depth: float = 4.0, size: float = 4.0,
                       colors=((0.95, 0.95, 0.95), (0.05, 0.05, 0.05)), overlap: float = 0.6) -> Scene:
    """Fronto-parallel grid of ``nx*ny`` surfels colored as a checkerboard (one surfel per cell)."""
    cell_x = size / nx
    cell_y = size * ny / nx / ny
    xs = (np.arange(nx) + 0.5) * cell_x - size / 2
    ys = (np.arange(ny) + 0.5) * cell_y - size * ny / nx / 2
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    n = nx * ny
    pos = np.column_stack([X.ravel(), Y.ravel(), np.full(n, depth)])
    parity = ((np.arange(nx)[:, None] + np.arange(ny)[None, :]) % 2).ravel()
    sh = np.zeros((n, 1, 3))
    sh[:, 0] = rgb_to_sh_dc(np.asarray(colors, float)[parity])
    tu = np.tile([1.0, 0.0, 0.0], (n, 1))
    tv = np.tile([0.0, 1.0, 0.0], (n, 1))
    scales = np.tile([overlap * cell_x, overlap * cell_y], (n, 1))
    return Scene(pos, tu, tv, scales, np.full(n, 0.95), sh, sh_degree=0)


# 5x7 bitmap glyphs, rows top to bottom
_GLYPHS = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "B": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "H": ["10001", "10001", "10001", "11111", "10001", "10001", "10001"],
    "K": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "S": ["01111", "10000", "10000", "01110", "00001", "00001", "11110"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "X": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
    " ": ["00000"] * 7,
}


def text_bitmap(lines, scale: int = 1) -> np.ndarray:
    """Render lines of text with a 5x7 bitmap font; returns a (H, W) array of 0/1."""
    rows = []
    width = max(len(l) for l in lines) * 6 - 1
    for li, line in enumerate(lines):
        block = np.zeros((7, width))
        for ci, ch in enumerate(line.upper()):
            g = np.array([[int(b) for b in r] for r in _GLYPHS[ch]])
            block[:, ci * 6:ci * 6 + 5] = g
        rows.append(block)
        if li < len(lines) - 1:
            rows.append(np.zeros((2, width)))
    bmp = np.concatenate(rows, axis=0)
    return np.kron(bmp, np.ones((scale, scale)))


def text_image(width: int, height: int, lines=("TEXT", "HASH"), ink=(0.05, 0.05, 0.1),
               paper=(0.95, 0.9, 0.8), margin: int = 2) -> np.ndarray:
    """Procedural text target of shape (height, width, 3): dark glyphs on a light card."""
    bmp = text_bitmap(lines)
    avail_h, avail_w = height - 2 * margin, width - 2 * margin
    s = max(1, min(avail_h // bmp.shape[0], avail_w // bmp.shape[1]))
    bmp = np.kron(bmp, np.ones((s, s)))
    img = np.tile(np.asarray(paper, float), (height, width, 1))
    y0 = (height - bmp.shape[0]) // 2
    x0 = (width - bmp.shape[1]) // 2
    region = img[y0:y0 + bmp.shape[0], x0:x0 + bmp.shape[1]]
    region[bmp > 0] = ink
    return img


def quad_scene(depth: float = 3.0, half: float = 1.0, color=(0.5, 0.5, 0.5), n_side: int = 2,
               sh_degree: int = 0, opacity: float = 0.98, background=(0.0, 0.0, 0.0)) -> Scene:
    """``n_side x n_side`` fronto-parallel surfels tiling a square of half-width ``half``."""
    cell = 2 * half / n_side
    cs = (np.arange(n_side) + 0.5) * cell - half
    X, Y = np.meshgrid(cs, cs, indexing="ij")
    n = n_side * n_side
    pos = np.column_stack([X.ravel(), Y.ravel(), np.full(n, depth)])
    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0] = rgb_to_sh_dc(color)
    return Scene(pos, np.tile([1.0, 0, 0], (n, 1)), np.tile([0, 1.0, 0], (n, 1)),
                 np.full((n, 2), 0.45 * cell), np.full(n, opacity), sh,
                 background=np.asarray(background, float), sh_degree=sh_degree)


def render_dataset(scene: Scene, cameras, **render_kwargs) -> Dataset:
    """Dataset whose reference images are renders of ``scene`` itself."""
    from .rasterizer import render

    return Dataset([View(c, render(scene, c, **render_kwargs).color) for c in cameras])
