"""Fisher-information sensitivity of surfels and pruning of the least sensitive ones.

For a converged model the Hessian of the L2 image loss is approximated by
``sum J J^T`` over pixels, where ``J`` is the image Jacobian.  Only the diagonal
over each surfel's position (3) and scales (2) is accumulated.

Each pixel's color depends on a surfel through exactly one hit, so its
Jacobian column is computed in forward mode from the blend records:

    dC/dtheta = T_i (c_i - Q_{i+1}) * opacity_i * dG_hat_i/dtheta + w_i * dtex/dtheta

where ``Q_{i+1}`` is the color composited behind hit ``i`` (background included).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .appearance import TexturePack
from .optimize import hit_partials
from .rasterizer import SortConfig, render
from .sampling import AVERAGE, get_rule
from .scene import Camera, Dataset, Scene

EPSILON_FLOOR = 1e-12
FISHER_PARAMS = (0, 1, 2, 6, 7)  # p_x, p_y, p_z, s_u, s_v in geometry order
PRUNE_CRITERIA = ("logdet", "l1")


@dataclass
class FisherReport:
    diag: np.ndarray  # (N, 5)
    scores: np.ndarray  # sum |log(diag + floor)|
    log_det: np.ndarray  # sum log(diag + floor)
    epsilon_floor: float
    removed: np.ndarray
    criterion: str

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "epsilon_floor": self.epsilon_floor,
            "removed": self.removed.tolist(),
            "scores": self.scores.tolist(),
            "log_det": self.log_det.tolist(),
            "diag": self.diag.tolist(),
            "score_summary": _summary(self.scores),
        }


def _summary(x: np.ndarray) -> dict:
    if x.size == 0:
        return {}
    q = np.percentile(x, [0, 25, 50, 75, 100])
    return dict(zip(["min", "p25", "median", "p75", "max"], map(float, q)))


def image_jacobians(scene: Scene, cam: Camera, sort: Optional[SortConfig] = None, rule=AVERAGE,
                    texture_mode: str = "additive"):
    """Per-hit ``dC/dtheta`` for the five Fisher parameters.

    Returns ``(surfel ids (B,), linear pixel ids (B,), jac (B, 3 channels, 5))``.
    """
    rule = get_rule(rule)
    out = render(scene, cam, sort, rule, record="full", texture_mode=texture_mode)
    texpack = TexturePack(scene.textures)
    sids, pixs, jacs = [], [], []
    for rec in out.records:
        if rec.alive.shape[1] == 0:
            continue
        a, T = rec.a, rec.T
        P, M = a.shape
        Q = np.tile(scene.background, (P, 1))
        dC_da = np.zeros((P, M, 3))
        for m in range(M - 1, -1, -1):
            alive = rec.alive[:, m, None]
            dC_da[:, m] = np.where(alive, T[:, m, None] * (rec.color[:, m] - Q), 0.0)
            Q = np.where(alive, rec.color[:, m] * a[:, m, None] + (1 - a[:, m, None]) * Q, Q)
        hp = hit_partials(scene, cam, rec, rule)
        r, s, sid = hp.rows, hp.slots, hp.sid
        dG = hp.dG[:, FISHER_PARAMS]
        jac = dC_da[r, s, :, None] * (scene.opacities[sid] * 1.0)[:, None, None] * dG[:, None, :]
        tex = rec.textured[r, s]
        if tex.any():
            ti = np.nonzero(tex)[0]
            _, du, dv, _ = texpack.lookup(sid[ti], rec.u[r[ti], s[ti]], rec.v[r[ti], s[ti]])
            w = rec.w[r[ti], s[ti]]
            jac[ti] += w[:, None, None] * (du[:, :, None] * hp.Ju[ti][:, None, FISHER_PARAMS]
                                           + dv[:, :, None] * hp.Jv[ti][:, None, FISHER_PARAMS])
        sids.append(sid)
        pixs.append(rec.pix[r])
        jacs.append(jac)
    if not sids:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3, 5))
    return np.concatenate(sids), np.concatenate(pixs), np.concatenate(jacs)


def fisher_diags(scene: Scene, dataset: Dataset, sort: Optional[SortConfig] = None, rule=AVERAGE,
                 texture_mode: str = "additive") -> np.ndarray:
    """(N, 5) squared image-Jacobian sums over every view, pixel and channel."""
    diag = np.zeros((len(scene), 5))
    for view in dataset:  # fixed view order keeps the reduction reproducible
        sid, _, jac = image_jacobians(scene, view.camera, sort, rule, texture_mode)
        np.add.at(diag, sid, np.sum(jac * jac, axis=1))
    return diag


def fisher_diag(scene: Scene, dataset: Dataset, surfel_index: int, **kwargs) -> np.ndarray:
    return fisher_diags(scene, dataset, **kwargs)[surfel_index]


def sensitivity_score(diag, epsilon_floor: float = EPSILON_FLOOR) -> np.ndarray:
    """``sum_p |log(diag_p + floor)|`` over the last axis."""
    if epsilon_floor <= 0:
        raise ValueError("epsilon_floor must be positive")
    return np.sum(np.abs(np.log(np.asarray(diag, float) + epsilon_floor)), axis=-1)


def log_det_score(diag, epsilon_floor: float = EPSILON_FLOOR) -> np.ndarray:
    """``sum_p log(diag_p + floor)``: log-volume of the diagonal information."""
    return np.sum(np.log(np.asarray(diag, float) + epsilon_floor), axis=-1)


def prune(scene: Scene, dataset: Dataset, fraction: float = 0.1, *, criterion: str = "logdet",
          epsilon_floor: float = EPSILON_FLOOR, sort: Optional[SortConfig] = None, rule=AVERAGE,
          texture_mode: str = "additive") -> tuple[Scene, FisherReport]:
    """Remove the ``floor(fraction * n)`` least informative surfels.

    ``criterion="logdet"`` ranks by the signed log sum, so surfels that no view
    constrains (zero information) go first.  ``criterion="l1"`` ranks by the
    absolute-log score.  Ties are broken by surfel index.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    if criterion not in PRUNE_CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    n = len(scene)
    diag = fisher_diags(scene, dataset, sort, rule, texture_mode) if n else np.zeros((0, 5))
    scores = sensitivity_score(diag, epsilon_floor)
    logdet = log_det_score(diag, epsilon_floor)
    key = logdet if criterion == "logdet" else scores
    k = int(np.floor(fraction * n))
    order = np.lexsort((np.arange(n), key))
    removed = np.sort(order[:k])
    keep = np.setdiff1d(np.arange(n), removed)
    report = FisherReport(diag, scores, logdet, epsilon_floor, removed, criterion)
    return scene.subset(keep), report
