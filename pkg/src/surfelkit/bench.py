"""Multi-resolution anti-aliasing benchmark.

Each quadrature rule renders the scene at full, 1/2, 1/4 and 1/8 of the base
resolution.  The reference for every level is a center-ray render at
``ref_scale`` times the base resolution, box-filtered down to that level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import psnr, ssim
from .rasterizer import SortConfig, render
from .sampling import RULES, get_rule
from .scene import Camera, Scene

LEVELS = (1, 2, 4, 8)
LEVEL_NAMES = {1: "full", 2: "1/2", 4: "1/4", 8: "1/8"}


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    img = img[:h * factor, :w * factor]
    return img.reshape(h, factor, w, factor, *img.shape[2:]).mean(axis=(1, 3))


def level_camera(base: Camera, level: int) -> Camera:
    if base.width % level or base.height % level:
        raise ValueError(f"base resolution {base.width}x{base.height} not divisible by {level}")
    return base.scaled(1.0 / level)


def reference_images(scene: Scene, base: Camera, levels=LEVELS, ref_scale: int = 2,
                     sort: SortConfig | None = None) -> dict:
    hi = render(scene, base.scaled(ref_scale), sort, "center").color
    return {lv: box_downsample(hi, lv * ref_scale) for lv in levels}


@dataclass
class BenchCell:
    rule: str
    level: int
    psnr: float
    ssim: float
    mse: float


def aa_bench(scene: Scene, base: Camera, rules=tuple(RULES), levels=LEVELS, ref_scale: int = 2,
             sort: SortConfig | None = None) -> list:
    refs = reference_images(scene, base, levels, ref_scale, sort)
    cells = []
    for name in rules:
        rule = get_rule(name)
        for lv in levels:
            img = render(scene, level_camera(base, lv), sort, rule).color
            ref = refs[lv]
            s = ssim(img, ref) if min(img.shape[:2]) >= 11 else float("nan")
            cells.append(BenchCell(name, lv, psnr(img, ref), s, float(np.mean((img - ref) ** 2))))
    return cells


def format_table(cells: list) -> str:
    """Rows are rules, columns PSNR/SSIM per resolution level."""
    levels = sorted({c.level for c in cells})
    rules = list(dict.fromkeys(c.rule for c in cells))
    by = {(c.rule, c.level): c for c in cells}
    head1 = f"{'rule':<10}" + "".join(f"{LEVEL_NAMES.get(lv, f'1/{lv}'):>18}" for lv in levels)
    head2 = f"{'':<10}" + "".join(f"{'PSNR':>9}{'SSIM':>9}" for _ in levels)
    lines = [head1, head2]
    for r in rules:
        row = f"{r:<10}"
        for lv in levels:
            c = by[(r, lv)]
            row += f"{c.psnr:9.2f}{c.ssim:9.4f}"
        lines.append(row)
    return "\n".join(lines)
