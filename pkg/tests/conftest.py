import numpy as np
import pytest

from surfelkit import toys
from surfelkit.appearance import texture_alloc
from surfelkit.projection import rotate_frames


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def add_random_textures(scene, rng, resolution=6.0, cap=4, scale=0.2):
    for i in range(len(scene)):
        t = texture_alloc(scene.surfel(i), resolution, cap)
        t.texels = rng.normal(scale=scale, size=t.texels.shape)
        scene.textures[i] = t
    return scene


def perturbed(scene, group, idx, eps):
    """Copy of ``scene`` with one scalar parameter moved by ``eps``."""
    s = scene.copy()
    if group == "positions":
        s.positions[idx] += eps
    elif group == "scales":
        s.scales[idx] += eps
    elif group == "opacities":
        s.opacities[idx] += eps
    elif group == "sh":
        s.sh[idx] += eps
    elif group == "rotations":
        i, axis = idx
        ang = np.zeros((1, 3))
        ang[0, axis] = eps
        tu, tv = rotate_frames(s.tangent_u[i], s.tangent_v[i], ang)
        s.tangent_u[i], s.tangent_v[i] = tu[0], tv[0]
    elif group == "texels":
        i, flat = idx
        s.textures[i].texels.reshape(-1)[flat] += eps
    else:
        raise KeyError(group)
    return s


def small_random_scene(seed, n=5, textured=True, sh_degree=1):
    rng = np.random.default_rng(seed)
    scene = toys.random_scene(rng, n, sh_degree=sh_degree)
    if textured:
        add_random_textures(scene, rng)
    return scene, rng


def parameter_list(scene, grads, texpack, rng=None, per_group=None):
    """``(group, index, analytic)`` triples for every scalar parameter (or a random subset)."""
    n = len(scene)
    items = []
    for i in range(n):
        for a in range(3):
            items.append(("positions", (i, a), grads.positions[i, a]))
            items.append(("rotations", (i, a), grads.rotations[i, a]))
        for a in range(2):
            items.append(("scales", (i, a), grads.scales[i, a]))
        items.append(("opacities", i, grads.opacities[i]))
        for k in range(scene.sh.shape[1]):
            for c in range(3):
                items.append(("sh", (i, k, c), grads.sh[i, k, c]))
        if scene.textures[i] is not None:
            for flat in range(scene.textures[i].texels.size):
                items.append(("texels", (i, flat), grads.texels.reshape(-1)[texpack.offset[i] * 3 + flat]))
    if per_group is not None:
        picked = []
        for g in ("positions", "rotations", "scales", "opacities", "sh", "texels"):
            group = [it for it in items if it[0] == g]
            if group:
                sel = rng.choice(len(group), min(per_group, len(group)), replace=False)
                picked += [group[j] for j in sorted(sel)]
        items = picked
    return items


def blend_signature(scene, cam, ref, cfg):
    """Discrete structure of the loss at ``scene``: per-pixel blend sequences,
    the normal-loss valid mask and the signs of the L1 residual."""
    from surfelkit.losses import L1_ZERO, depth_normals

    out = cfg.render(scene, cam, record="log")
    seqs = []
    for rec in out.records:
        for row in range(len(rec.pix)):
            seqs.append((int(rec.pix[row]), tuple(rec.sid[row][rec.alive[row]].tolist())))
    valid = depth_normals(out.depth, out.accumulated, cam, cfg.normal_min_weight).valid
    diff = out.color - ref
    signs = np.where(np.abs(diff) > L1_ZERO, np.sign(diff), 0.0)
    return sorted(seqs), valid.tobytes(), signs.tobytes()


def gradient_errors(scene, cam, ref, cfg, rng=None, per_group=None, steps=(1e-5, 1e-6, 1e-7)):
    """Relative errors of analytic partials against central differences.

    A central difference is only a valid oracle when the loss is smooth on
    ``[x - h, x + h]``.  The first step whose perturbed renders keep the blend
    signature of the base point is used; parameters where every step straddles
    a discontinuity get ``nan`` as their error.
    """
    from surfelkit.appearance import TexturePack
    from surfelkit.optimize import backward, evaluate_loss

    _, grads = backward(scene, cam, ref, cfg)
    f = lambda s: evaluate_loss(s, cam, ref, cfg).total
    base = blend_signature(scene, cam, ref, cfg)
    out = []
    for group, idx, an in parameter_list(scene, grads, TexturePack(scene.textures), rng, per_group):
        err, fd = float("nan"), float("nan")
        for h in steps:
            hi, lo = perturbed(scene, group, idx, h), perturbed(scene, group, idx, -h)
            if blend_signature(hi, cam, ref, cfg) != base or blend_signature(lo, cam, ref, cfg) != base:
                continue
            fd = (f(hi) - f(lo)) / (2 * h)
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            break
        out.append((err, group, idx, an, fd))
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
