"""Loss assembly, analytic gradients through the renderer, and the two-stage fitter.

The backward pass walks the per-pixel blend records of a ``record="full"``
render.  Per pixel it gathers adjoints of color, expected depth, blended normal
and accumulated weight, turns them into per-hit adjoints of weight/depth/color/
normal, runs the back-to-front transmittance recursion to get per-hit alpha
adjoints, and finally maps everything onto surfel parameters through the
frustum density rule, the exact ray/plane Jacobians, SH and bilinear texels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .appearance import TexturePack, texture_alloc
from .losses import distortion_terms, loss_color_terms, loss_depth_distortion, normal_terms
from .projection import hit_jacobian, rotate_frames
from .rasterizer import RenderBuffers, SortConfig, render
from .sampling import AVERAGE, get_rule
from .scene import Camera, Dataset, Scene

log = logging.getLogger(__name__)

GROUPS = ("positions", "rotations", "scales", "opacities", "sh", "texels")
GEOMETRY = frozenset({"positions", "rotations", "scales"})
STAGE1 = frozenset({"positions", "rotations", "scales", "opacities", "sh"})
STAGE2 = frozenset({"texels"})


@dataclass
class LossConfig:
    lambda_d: float = 1000.0
    lambda_n: float = 0.05
    ssim_weight: float = 0.2
    rule: object = AVERAGE
    sort: SortConfig = field(default_factory=SortConfig)
    texture_mode: str = "additive"
    normal_min_weight: float = 0.01
    half_extent: float = 0.5

    def render(self, scene: Scene, cam: Camera, record: str = "full") -> RenderBuffers:
        return render(scene, cam, self.sort, self.rule, record=record, half_extent=self.half_extent,
                      texture_mode=self.texture_mode)


@dataclass
class LossTerms:
    L_c: float
    L_d: float
    L_n: float
    lambda_d: float
    lambda_n: float

    @property
    def total(self) -> float:
        return self.L_c + self.lambda_n * self.L_n + self.lambda_d * self.L_d

    def __add__(self, other: "LossTerms") -> "LossTerms":
        return LossTerms(self.L_c + other.L_c, self.L_d + other.L_d, self.L_n + other.L_n,
                         self.lambda_d, self.lambda_n)

    def scaled(self, f: float) -> "LossTerms":
        return LossTerms(self.L_c * f, self.L_d * f, self.L_n * f, self.lambda_d, self.lambda_n)


@dataclass
class GradientSet:
    """Partials of the loss for every parameter group.

    ``rotations`` holds derivatives w.r.t. small rotation angles about
    ``(n, t_u, t_v)``; ``texels`` are flattened in :class:`TexturePack` order.
    Groups outside ``trainable`` are exactly zero.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    texels: np.ndarray
    trainable: frozenset = frozenset(GROUPS)

    @classmethod
    def zeros(cls, scene: Scene, n_texels: int, trainable=frozenset(GROUPS)) -> "GradientSet":
        n = len(scene)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros_like(scene.sh), np.zeros((n_texels, 3)), frozenset(trainable))

    def __iadd__(self, other: "GradientSet") -> "GradientSet":
        for g in GROUPS:
            getattr(self, g).__iadd__(getattr(other, g))
        return self

    def scale(self, f: float) -> None:
        for g in GROUPS:
            getattr(self, g).__imul__(f)

    def apply_mask(self) -> None:
        for g in GROUPS:
            if g not in self.trainable:
                getattr(self, g)[...] = 0.0

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, g))) for g in GROUPS)


@dataclass
class HitPartials:
    """Flat per-hit quantities shared by the backward pass and the Fisher scorer."""

    rows: np.ndarray
    slots: np.ndarray
    sid: np.ndarray
    Ju: np.ndarray
    Jv: np.ndarray
    Jz: np.ndarray
    dG: np.ndarray  # d G_hat / d geometry, (B, 8)
    corner: list  # per corner: (hit mask, Ju, Jv, d G_k / d geometry)


def hit_partials(scene: Scene, cam: Camera, rec, rule) -> HitPartials:
    rule = get_rule(rule)
    rows, slots = np.nonzero(rec.alive)
    sid = rec.sid[rows, slots]
    O = cam.center
    geo = (scene.positions[sid], scene.tangent_u[sid], scene.tangent_v[sid], scene.scales[sid])
    u, v, _, Ju, Jv, Jz = hit_jacobian(O, rec.dirs[rows, 0], rec.dcz[rows, 0], *geo)
    G0 = rec.g_center[rows, slots]
    dG = rule.center_weight * (-G0[:, None] * (u[:, None] * Ju + v[:, None] * Jv))
    corner = []
    for k in range(4):
        ok = rec.corner_valid[rows, slots, k]
        idx = np.nonzero(ok)[0]
        if rule.uses_corners:
            uc, vc, _, Juc, Jvc, _ = hit_jacobian(O, rec.dirs[rows[idx], 1 + k], rec.dcz[rows[idx], 1 + k],
                                                  *(a[idx] for a in geo))
            Gc = rec.g_corner[rows[idx], slots[idx], k]
            dGc = -Gc[:, None] * (uc[:, None] * Juc + vc[:, None] * Jvc)
            dG[idx] += rule.corner_weight * dGc
            corner.append((idx, Juc, Jvc, dGc))
    return HitPartials(rows, slots, sid, Ju, Jv, Jz, dG, corner)


def _scatter(out: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    np.add.at(out, idx, vals)


def backward_view(scene: Scene, cam: Camera, reference: np.ndarray, cfg: LossConfig,
                  trainable=frozenset(GROUPS), texpack: Optional[TexturePack] = None):
    """Loss terms and parameter gradients for one view."""
    rule = get_rule(cfg.rule)
    texpack = texpack or TexturePack(scene.textures)
    out = cfg.render(scene, cam, record="full")
    H, W = cam.height, cam.width
    n_pix = H * W

    L_c, gC = loss_color_terms(out.color, reference, cfg.ssim_weight)
    gC = gC.reshape(n_pix, 3)
    acc = out.accumulated
    if cfg.lambda_n:
        L_n, gD, gA, gN = normal_terms(out.depth, acc, out.normal, cam, cfg.normal_min_weight)
        gD = cfg.lambda_n * gD.ravel()
        gA = cfg.lambda_n * gA.ravel()
        gN = cfg.lambda_n * gN.reshape(n_pix, 3)
    else:
        L_n, gD, gA, gN = 0.0, np.zeros(n_pix), np.zeros(n_pix), np.zeros((n_pix, 3))

    grads = GradientSet.zeros(scene, len(texpack.texels), trainable)
    L_d = 0.0
    for rec in out.records:
        if rec.alive.shape[1] == 0:
            continue
        pix = rec.pix
        w = rec.w
        z = np.where(rec.alive, rec.z, 0.0)
        per_row, gw_d, gz_d = distortion_terms(z, w)
        L_d += per_row.sum() / n_pix
        k_d = cfg.lambda_d / n_pix
        gCp = gC[pix]
        # per-hit adjoints of weight, depth, color, normal
        gw = (np.einsum("pc,pmc->pm", gCp, rec.color) + gD[pix, None] * z
              + np.einsum("pc,pmc->pm", gN[pix], rec.normal) + gA[pix, None] + k_d * gw_d)
        gz = gD[pix, None] * w + k_d * gz_d
        gw = np.where(rec.alive, gw, 0.0)
        # back-to-front transmittance recursion
        a = rec.a
        Q = gCp @ scene.background
        ga = np.zeros_like(a)
        for m in range(a.shape[1] - 1, -1, -1):
            alive = rec.alive[:, m]
            ga[:, m] = np.where(alive, rec.T[:, m] * (gw[:, m] - Q), 0.0)
            Q = np.where(alive, gw[:, m] * a[:, m] + (1 - a[:, m]) * Q, Q)

        hp = hit_partials(scene, cam, rec, rule)
        r, s, sid = hp.rows, hp.slots, hp.sid
        opa = scene.opacities[sid]
        g_hat = rec.g_hat[r, s]
        ga_f = ga[r, s]
        gc = w[r, s, None] * gCp[r]  # adjoint of the hit color
        gn = w[r, s, None] * gN[pix][r]

        _scatter(grads.opacities, sid, ga_f * g_hat)
        gGhat = ga_f * opa
        g_geom = gGhat[:, None] * hp.dG + gz[r, s, None] * hp.Jz
        # texture color depends on the center (u, v)
        tex = rec.textured[r, s]
        if tex.any():
            ti = np.nonzero(tex)[0]
            _, du, dv, (tidx, tw) = texpack.lookup(sid[ti], rec.u[r[ti], s[ti]], rec.v[r[ti], s[ti]])
            gu = np.sum(gc[ti] * du, axis=1)
            gv = np.sum(gc[ti] * dv, axis=1)
            g_geom[ti] += gu[:, None] * hp.Ju[ti] + gv[:, None] * hp.Jv[ti]
            if "texels" in trainable:
                _scatter(grads.texels, tidx.ravel(), (tw[..., None] * gc[ti, None, :]).reshape(-1, 3))
        # oriented normal n = sign * (t_u x t_v) rotates as dn = omega x n
        nrm = rec.normal[r, s]
        g_omega = np.cross(nrm, gn)
        axes = np.stack([scene.normals[sid], scene.tangent_u[sid], scene.tangent_v[sid]], axis=1)
        g_geom[:, 3:6] += np.einsum("bk,bak->ba", g_omega, axes)

        _scatter(grads.positions, sid, g_geom[:, 0:3])
        _scatter(grads.rotations, sid, g_geom[:, 3:6])
        _scatter(grads.scales, sid, g_geom[:, 6:8])
        Y = rec.sh_y[r]
        gsh = Y[:, :, None] * gc[:, None, :]
        if cfg.texture_mode == "replace_dc" and tex.any():
            gsh[tex, 0] = 0.0
        _scatter(grads.sh, sid, gsh)

    terms = LossTerms(L_c, L_d, L_n, cfg.lambda_d, cfg.lambda_n)
    grads.apply_mask()
    return terms, grads, out


def backward(scene: Scene, cam: Camera, reference: np.ndarray, cfg: Optional[LossConfig] = None,
             trainable=frozenset(GROUPS)) -> tuple[LossTerms, GradientSet]:
    """Analytic gradient of ``L = L_c + lambda_n L_n + lambda_d L_d`` for one view."""
    terms, grads, _ = backward_view(scene, cam, reference, cfg or LossConfig(), trainable)
    return terms, grads


def dataset_loss(scene: Scene, dataset: Dataset, cfg: Optional[LossConfig] = None,
                 trainable=frozenset(GROUPS)) -> tuple[LossTerms, GradientSet]:
    """View-averaged loss and gradient (views reduced in dataset order)."""
    cfg = cfg or LossConfig()
    texpack = TexturePack(scene.textures)
    total, grads = None, None
    for view in dataset:
        t, g, _ = backward_view(scene, view.camera, view.image, cfg, trainable, texpack)
        total = t if total is None else total + t
        if grads is None:
            grads = g
        else:
            grads += g
    f = 1.0 / len(dataset)
    grads.scale(f)
    return total.scaled(f), grads


def evaluate_loss(scene: Scene, cam: Camera, reference: np.ndarray,
                  cfg: Optional[LossConfig] = None) -> LossTerms:
    """Loss terms without gradients (used by finite-difference checks)."""
    cfg = cfg or LossConfig()
    out = cfg.render(scene, cam, record="log")
    L_c, _ = loss_color_terms(out.color, reference, cfg.ssim_weight)
    L_d = loss_depth_distortion(out)
    L_n = normal_terms(out.depth, out.accumulated, out.normal, cam, cfg.normal_min_weight)[0] if cfg.lambda_n else 0.0
    return LossTerms(L_c, L_d, L_n, cfg.lambda_d, cfg.lambda_n)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class LearningRates:
    position: float = 1.6e-4  # multiplied by the scene extent
    position_final: float = 1.6e-6
    opacity: float = 0.05
    sh: float = 2.5e-3
    scale: float = 5e-3
    rotation: float = 5e-3
    texels: float = 2.5e-2


class Adam:
    """Adaptive-moment steps over named parameter groups."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def direction(self, name: str, g: np.ndarray) -> np.ndarray:
        if name not in self.m or self.m[name].shape != g.shape:
            self.m[name] = np.zeros_like(g)
            self.v[name] = np.zeros_like(g)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
        mh = m / (1 - self.beta1 ** t)
        vh = v / (1 - self.beta2 ** t)
        return mh / (np.sqrt(vh) + self.eps)


class SGD:
    def direction(self, name: str, g: np.ndarray) -> np.ndarray:
        return g


def _logit(a):
    a = np.clip(a, 1e-6, 1 - 1e-6)
    return np.log(a / (1 - a))


def apply_step(scene: Scene, grads: GradientSet, opt, lr: LearningRates, extent: float = 1.0,
               position_lr: Optional[float] = None, texpack: Optional[TexturePack] = None) -> None:
    """One in-place descent step on the trainable groups of ``scene``.

    Opacities move in logit space, scales in log space and tangent frames by a
    small rotation (re-orthonormalized afterwards).
    """
    tr = grads.trainable
    if "positions" in tr:
        step = (position_lr if position_lr is not None else lr.position * extent)
        scene.positions -= step * opt.direction("positions", grads.positions)
    if "rotations" in tr:
        d = opt.direction("rotations", grads.rotations)
        scene.tangent_u, scene.tangent_v = rotate_frames(scene.tangent_u, scene.tangent_v, -lr.rotation * d)
        scene.orthonormalize()
    if "scales" in tr:
        g_log = grads.scales * scene.scales
        scene.scales = np.exp(np.log(scene.scales) - lr.scale * opt.direction("scales", g_log))
    if "opacities" in tr:
        a = scene.opacities
        g_logit = grads.opacities * a * (1 - a)
        x = _logit(a) - lr.opacity * opt.direction("opacities", g_logit)
        scene.opacities = 1.0 / (1.0 + np.exp(-x))
    if "sh" in tr:
        scene.sh -= lr.sh * opt.direction("sh", grads.sh)
    if "texels" in tr and len(grads.texels):
        texpack = texpack or TexturePack(scene.textures)
        flat = texpack.texels - lr.texels * opt.direction("texels", grads.texels)
        for i, t in enumerate(texpack.split(flat)):
            if t is not None:
                scene.textures[i].texels = t


# --------------------------------------------------------------------------
# two-stage fitting
# --------------------------------------------------------------------------


class FitDivergence(RuntimeError):
    pass


@dataclass
class FitSchedule:
    iters_1: int = 300
    iters_2: int = 300
    stages: int = 2
    prune_fraction: float = 0.1
    tex_res: float = 1000.0
    tex_cap: int = 64
    tex_init: str = "zero"  # or "background"
    stage1_params: frozenset = STAGE1
    stage2_params: frozenset = STAGE2
    loss: LossConfig = field(default_factory=LossConfig)
    stage2_loss: Optional[LossConfig] = None
    lr: LearningRates = field(default_factory=LearningRates)
    optimizer: str = "adam"


@dataclass
class FitResult:
    scene: Scene
    losses: list  # total loss per iteration, stage 1 then stage 2
    stage_boundaries: list
    stage1_scene: Optional[Scene] = None
    pruned: Optional[np.ndarray] = None
    fisher: object = None


def run_stage(scene: Scene, dataset: Dataset, iters: int, trainable, cfg: LossConfig,
              lr: LearningRates, optimizer: str = "adam", losses: Optional[list] = None) -> list:
    """Gradient descent on ``scene`` (in place); returns the per-iteration loss."""
    losses = [] if losses is None else losses
    opt = Adam() if optimizer == "adam" else SGD()
    extent = dataset.scene_extent()
    for it in range(iters):
        terms, grads = dataset_loss(scene, dataset, cfg, trainable)
        total = terms.total
        if not np.isfinite(total) or not grads.all_finite():
            raise FitDivergence(f"non-finite loss or gradient at iteration {it} "
                                f"(L_c={terms.L_c}, L_d={terms.L_d}, L_n={terms.L_n})")
        losses.append(total)
        frac = it / max(iters - 1, 1)
        pos_lr = extent * float(np.exp((1 - frac) * np.log(lr.position) + frac * np.log(lr.position_final)))
        apply_step(scene, grads, opt, lr, extent, pos_lr)
    return losses


def allocate_textures(scene: Scene, resolution: float, cap: int, init: str = "zero") -> None:
    fill = scene.background if init == "background" else np.zeros(3)
    for i in range(len(scene)):
        if scene.textures[i] is None:
            scene.textures[i] = texture_alloc(scene.surfel(i), resolution, cap, fill)


def fit(scene: Scene, dataset: Dataset, schedule: Optional[FitSchedule] = None) -> FitResult:
    """Stage 1 (geometry + appearance), Fisher pruning, texture allocation, stage 2."""
    from .fisher import prune

    sch = schedule or FitSchedule()
    scene = scene.copy()
    losses: list = []
    run_stage(scene, dataset, sch.iters_1, sch.stage1_params, sch.loss, sch.lr, sch.optimizer, losses)
    bounds = [len(losses)]
    stage1 = scene.copy()
    result = FitResult(scene, losses, bounds, stage1)
    if sch.stages < 2:
        return result
    if sch.prune_fraction > 0:
        scene, report = prune(scene, dataset, sch.prune_fraction, sort=sch.loss.sort, rule=sch.loss.rule)
        result.pruned = report.removed
        result.fisher = report
    allocate_textures(scene, sch.tex_res, sch.tex_cap, sch.tex_init)
    cfg2 = sch.stage2_loss or sch.loss
    run_stage(scene, dataset, sch.iters_2, sch.stage2_params, cfg2, sch.lr, sch.optimizer, losses)
    bounds.append(len(losses))
    result.scene = scene
    return result
