"""Domain types: surfels, per-surfel textures, pinhole cameras, scenes and datasets.

A :class:`Scene` stores its surfels as parallel arrays (structure of arrays) so the
rasterizer and the optimizer can work on whole columns at once.  Individual
:class:`Surfel` records are available through :meth:`Scene.surfel` and
:meth:`Scene.from_surfels`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_SH_DEGREE = 3
DEFAULT_CUTOFF = 4.5


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class TextureMap:
    """Per-surfel RGB texture indexed by ``texels[iu, iv, channel]``."""

    texels: np.ndarray
    resolution: float = 1.0
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        if self.texels.ndim != 3:
            raise ValueError(f"texels must be (U, V, C), got shape {self.texels.shape}")

    @property
    def width(self) -> int:
        return self.texels.shape[0]

    @property
    def height(self) -> int:
        return self.texels.shape[1]

    @property
    def channels(self) -> int:
        return self.texels.shape[2]

    def copy(self) -> "TextureMap":
        return TextureMap(self.texels.copy(), self.resolution, self.cutoff)


@dataclass
class Surfel:
    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float
    sh: np.ndarray  # ((L+1)^2, 3)
    texture: Optional[TextureMap] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1


def surfel_normal(s: Surfel, view_dir) -> np.ndarray:
    """Unit normal ``±(t_u × t_v)`` oriented so that ``n · view_dir < 0``."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if not np.any(view_dir):
        raise ValueError("view_dir must be nonzero")
    n = np.cross(s.tangent_u, s.tangent_v)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise ValueError("degenerate tangent frame: |t_u x t_v| < 1e-12")
    n = n / norm
    if n @ view_dir > 0:
        n = -n
    return n


def orthonormalize_frames(tu: np.ndarray, tv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gram-Schmidt ``t_v`` against ``t_u`` row-wise; both returned unit length."""
    tu = np.asarray(tu, dtype=np.float64)
    tv = np.asarray(tv, dtype=np.float64)
    tu = tu / np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = tv - np.sum(tv * tu, axis=-1, keepdims=True) * tu
    tv = tv / np.linalg.norm(tv, axis=-1, keepdims=True)
    return tu, tv


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``rotation``/``translation`` map world points to camera space:
    ``x_cam = rotation @ x_world + translation``.  Pixel ``(i, j)`` covers
    ``[i, i+1] x [j, j+1]`` in image coordinates, so its center is at ``i + 0.5``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 50.0,
                width: int = 64, height: int = 64, near: float = 0.01) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``up`` points up in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        down = -(up - (up @ fwd) * fwd)
        down /= np.linalg.norm(down)
        right = np.cross(down, fwd)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(R, -R @ eye, f, f, width / 2.0, height / 2.0, width, height, near)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def pixel_half_extents(self) -> tuple[float, float]:
        """Half a pixel in normalized image coordinates."""
        return 0.5 / self.fx, 0.5 / self.fy

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def projection_matrix(self) -> np.ndarray:
        """4x4 ``P`` with ``P @ (X, 1) = (px*z, py*z, z, z)``."""
        K4 = np.array([
            [self.fx, 0.0, self.cx, 0.0],
            [0.0, self.fy, self.cy, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
        E = np.eye(4)
        E[:3, :3] = self.rotation
        E[:3, 3] = self.translation
        return K4 @ E

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel coordinates, camera depth)."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.fx * pc[..., 0] / z + self.cx
            py = self.fy * pc[..., 1] / z + self.cy
        return np.stack([px, py], axis=-1), z

    def scaled(self, factor: float) -> "Camera":
        """Same pose rendered at ``factor`` times the resolution."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return Camera(self.rotation, self.translation, self.fx * sx, self.fy * sy,
                      self.cx * sx, self.cy * sy, w, h, self.near)

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "near": self.near,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["rotation"], d["translation"], float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]),
                   float(d.get("near", 0.01)))


@dataclass
class Scene:
    positions: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scales: np.ndarray  # (N, 2): s_u, s_v
    opacities: np.ndarray
    sh: np.ndarray  # (N, (L+1)^2, 3)
    textures: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_degree: int = DEFAULT_SH_DEGREE

    def __post_init__(self):
        n = len(self.positions)
        k = num_sh_coeffs(self.sh_degree)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64).reshape(n, 3)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 2)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, k, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not self.textures:
            self.textures = [None] * n
        if len(self.textures) != n:
            raise ValueError("one texture slot per surfel required")

    @classmethod
    def empty(cls, sh_degree: int = DEFAULT_SH_DEGREE, background=(0.0, 0.0, 0.0)) -> "Scene":
        k = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                   np.zeros(0), np.zeros((0, k, 3)), [], np.asarray(background, float), sh_degree)

    @classmethod
    def from_surfels(cls, surfels: Sequence[Surfel], background=(0.0, 0.0, 0.0),
                     sh_degree: Optional[int] = None) -> "Scene":
        if sh_degree is None:
            sh_degree = surfels[0].sh_degree if surfels else DEFAULT_SH_DEGREE
        if not surfels:
            return cls.empty(sh_degree, background)
        k = num_sh_coeffs(sh_degree)
        sh = np.zeros((len(surfels), k, 3))
        for i, s in enumerate(surfels):
            m = min(k, s.sh.shape[0])
            sh[i, :m] = s.sh[:m]
        return cls(
            np.stack([s.center for s in surfels]),
            np.stack([s.tangent_u for s in surfels]),
            np.stack([s.tangent_v for s in surfels]),
            np.array([[s.scale_u, s.scale_v] for s in surfels]),
            np.array([s.opacity for s in surfels]),
            sh,
            [s.texture for s in surfels],
            np.asarray(background, dtype=np.float64),
            sh_degree,
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def normals(self) -> np.ndarray:
        """Unoriented ``t_u × t_v`` per surfel."""
        return np.cross(self.tangent_u, self.tangent_v)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i].copy(), self.tangent_u[i].copy(), self.tangent_v[i].copy(),
                      float(self.scales[i, 0]), float(self.scales[i, 1]), float(self.opacities[i]),
                      self.sh[i].copy(), self.textures[i])

    def __iter__(self):
        return (self.surfel(i) for i in range(len(self)))

    def copy(self) -> "Scene":
        return Scene(self.positions.copy(), self.tangent_u.copy(), self.tangent_v.copy(),
                     self.scales.copy(), self.opacities.copy(), self.sh.copy(),
                     [None if t is None else t.copy() for t in self.textures],
                     self.background.copy(), self.sh_degree)

    def subset(self, indices: Iterable[int]) -> "Scene":
        idx = np.asarray(list(indices), dtype=np.int64)
        return Scene(self.positions[idx], self.tangent_u[idx], self.tangent_v[idx],
                     self.scales[idx], self.opacities[idx], self.sh[idx],
                     [self.textures[i] for i in idx], self.background.copy(), self.sh_degree)

    def permuted(self, order) -> "Scene":
        return self.subset(order)

    def orthonormalize(self) -> None:
        if len(self):
            self.tangent_u, self.tangent_v = orthonormalize_frames(self.tangent_u, self.tangent_v)

    @property
    def has_textures(self) -> bool:
        return any(t is not None for t in self.textures)


def validate_scene(scene: Scene, tol: float = 1e-9) -> list[str]:
    """Report every violated surfel invariant; never raises."""
    problems = []
    for i in range(len(scene)):
        tu, tv = scene.tangent_u[i], scene.tangent_v[i]
        if abs(np.linalg.norm(tu) - 1.0) > tol:
            problems.append(f"surfel {i}: tangent_u not unit length")
        if abs(np.linalg.norm(tv) - 1.0) > tol:
            problems.append(f"surfel {i}: tangent_v not unit length")
        if abs(tu @ tv) > tol:
            problems.append(f"surfel {i}: tangents violate orthogonality (t_u.t_v={tu @ tv:.3g})")
        if not np.all(scene.scales[i] > 0):
            problems.append(f"surfel {i}: scale must be positive")
        a = scene.opacities[i]
        if not (0.0 <= a <= 1.0):
            problems.append(f"surfel {i}: opacity {a} outside [0, 1]")
        if not (np.all(np.isfinite(scene.positions[i])) and np.all(np.isfinite(scene.sh[i]))):
            problems.append(f"surfel {i}: non-finite center or SH coefficients")
        tex = scene.textures[i]
        if tex is not None and not np.all(np.isfinite(tex.texels)):
            problems.append(f"surfel {i}: non-finite texels")
    if not np.all(np.isfinite(scene.background)):
        problems.append("scene: non-finite background")
    return problems


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, C) in [0, 1]


@dataclass
class Dataset:
    views: list

    def __post_init__(self):
        if not self.views:
            raise ValueError("a dataset needs at least one view")
        chans = {v.image.shape[-1] for v in self.views}
        if len(chans) != 1:
            raise ValueError("all views must share a channel count")
        for v in self.views:
            if v.image.shape[:2] != (v.camera.height, v.camera.width):
                raise ValueError("image resolution does not match its camera")

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    @property
    def cameras(self) -> list:
        return [v.camera for v in self.views]

    def scene_extent(self) -> float:
        centers = np.stack([c.center for c in self.cameras])
        radius = np.linalg.norm(centers - centers.mean(0), axis=1).max()
        return float(max(radius, 1.0) * 1.1)
