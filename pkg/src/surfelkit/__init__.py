"""CPU toolkit for textured 2D Gaussian surfels: exact ray/surfel rendering,
frustum anti-aliasing, per-ray sorting, Fisher pruning and a two-stage fitter."""
from .scene import Camera, Dataset, Scene, Surfel, TextureMap, View, surfel_normal, validate_scene
from .rasterizer import RenderBuffers, SortConfig, render

__all__ = [
    "Camera", "Dataset", "Scene", "Surfel", "TextureMap", "View", "surfel_normal",
    "validate_scene", "RenderBuffers", "SortConfig", "render",
]
