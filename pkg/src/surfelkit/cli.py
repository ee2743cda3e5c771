"""Command-line entry point: ``surfelkit <command> [options]``.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Options may also come
from a JSON file given with ``--config``; explicit flags take precedence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .bench import LEVELS, aa_bench, format_table
from .fisher import PRUNE_CRITERIA, prune
from .metrics import depth_order_error, metrics_report
from .optimize import FitSchedule, LossConfig, fit
from .rasterizer import SortConfig, render
from .sampling import RULES, get_rule, quadrature_error_order, quadrature_errors
from .appearance import TEXTURE_MODES

log = logging.getLogger("surfelkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sort_args(p):
    p.add_argument("--sort", choices=["global", "kray"], default="kray",
                   help="global: one per-view center-depth order; kray: per-tile + per-ray k-buffer")
    p.add_argument("--k", type=int, default=24, help="k-buffer capacity")
    p.add_argument("--tile", type=int, default=8, help="tile size in pixels")
    p.add_argument("--aa-rule", choices=sorted(RULES), default="average")


def _common(p):
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--deterministic", action="store_true",
                   help="fixed reduction order (single-threaded accumulation)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="surfelkit", description="Textured 2D Gaussian surfel toolkit")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("render", help="render a scene from a camera")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="camera JSON")
    p.add_argument("--out", required=True, help=".ppm or .pfm")
    p.add_argument("--depth-out")
    p.add_argument("--normal-out")
    p.add_argument("--tex-mode", choices=TEXTURE_MODES, default="additive")
    _sort_args(p)
    _common(p)

    p = sub.add_parser("fit", help="two-stage fit of an initial scene to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", required=True, help="initial scene")
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=int, choices=[1, 2], default=2)
    p.add_argument("--prune", type=float, default=0.1)
    p.add_argument("--tex-res", type=float, default=1000.0)
    p.add_argument("--tex-cap", type=int, default=64)
    p.add_argument("--tex-init", choices=["zero", "background"], default="zero")
    p.add_argument("--tex-mode", choices=TEXTURE_MODES, default="additive")
    p.add_argument("--iters-1", type=int, default=300)
    p.add_argument("--iters-2", type=int, default=300)
    p.add_argument("--lambda-d", type=float, default=1000.0)
    p.add_argument("--lambda-n", type=float, default=0.05)
    p.add_argument("--ssim-weight", type=float, default=0.2)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--loss-out", help="write the loss curve as JSON")
    _sort_args(p)
    _common(p)

    p = sub.add_parser("prune", help="Fisher-sensitivity pruning")
    p.add_argument("--scene", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--criterion", choices=PRUNE_CRITERIA, default="logdet")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _sort_args(p)
    _common(p)

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--crop", help="x,y,w,h")
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("sort-error", help="per-ray depth-order error of a render")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out")
    _sort_args(p)
    _common(p)

    p = sub.add_parser("aa-bench", help="multi-resolution anti-aliasing table")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True, help="full-resolution camera JSON")
    p.add_argument("--ref-scale", type=int, default=2)
    p.add_argument("--out")
    _sort_args(p)
    _common(p)

    p = sub.add_parser("quadrature-check", help="observed error orders of the quadrature rules")
    p.add_argument("--h", type=float, default=0.5)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--out")
    _common(p)
    return ap


def _sort_cfg(a) -> SortConfig:
    return SortConfig(tile_size=a.tile, k=a.k, mode="global-center" if a.sort == "global" else "per-ray-k")


def _threads(a):
    return 1 if a.deterministic else a.threads


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def cmd_render(a) -> int:
    scene = io.load_scene(a.scene)
    cam = io.load_camera(a.camera)
    out = render(scene, cam, _sort_cfg(a), get_rule(a.aa_rule), texture_mode=a.tex_mode,
                 threads=_threads(a))
    io.write_image(a.out, np.clip(out.color, 0.0, 1.0))
    if a.depth_out:
        io.write_image(a.depth_out, out.depth)
    if a.normal_out:
        io.write_image(a.normal_out, out.normal)
    return 0


def cmd_fit(a) -> int:
    dataset = io.load_dataset(a.dataset)
    init = io.load_scene(a.init)
    loss = LossConfig(a.lambda_d, a.lambda_n, a.ssim_weight, get_rule(a.aa_rule), _sort_cfg(a), a.tex_mode)
    sch = FitSchedule(iters_1=a.iters_1, iters_2=a.iters_2, stages=a.stages, prune_fraction=a.prune,
                      tex_res=a.tex_res, tex_cap=a.tex_cap, tex_init=a.tex_init, loss=loss,
                      optimizer=a.optimizer)
    res = fit(init, dataset, sch)
    io.save_scene(res.scene, a.out)
    if a.loss_out:
        _write_json(a.loss_out, {"loss": res.losses, "stage_boundaries": res.stage_boundaries,
                                 "pruned": [] if res.pruned is None else res.pruned.tolist()})
    log.info("final loss %.6g", res.losses[-1] if res.losses else float("nan"))
    return 0


def cmd_prune(a) -> int:
    scene = io.load_scene(a.scene)
    dataset = io.load_dataset(a.dataset)
    pruned, report = prune(scene, dataset, a.fraction, criterion=a.criterion, sort=_sort_cfg(a),
                           rule=get_rule(a.aa_rule))
    io.save_scene(pruned, a.out)
    if a.report:
        _write_json(a.report, report.to_dict())
    print(f"removed {len(report.removed)} of {len(scene)} surfels")
    return 0


def cmd_metrics(a) -> int:
    img_a, img_b = io.read_image(a.a), io.read_image(a.b)
    rect = None
    if a.crop:
        try:
            rect = tuple(int(v) for v in a.crop.split(","))
        except ValueError:
            raise UsageError("--crop expects x,y,w,h") from None
        if len(rect) != 4:
            raise UsageError("--crop expects x,y,w,h")
    rep = metrics_report(img_a, img_b, rect)
    d = rep.to_dict()
    d.pop("order_error")
    _write_json(a.out, d)
    return 0


def cmd_sort_error(a) -> int:
    scene = io.load_scene(a.scene)
    cam = io.load_camera(a.camera)
    out = render(scene, cam, _sort_cfg(a), get_rule(a.aa_rule), record="log", threads=_threads(a))
    _write_json(a.out, {"sort": a.sort, "k": a.k, "order_error": depth_order_error(out)})
    return 0


def cmd_aa_bench(a) -> int:
    scene = io.load_scene(a.scene)
    cam = io.load_camera(a.camera)
    cells = aa_bench(scene, cam, tuple(RULES), LEVELS, a.ref_scale, _sort_cfg(a))
    print(format_table(cells))
    if a.out:
        _write_json(a.out, [c.__dict__ for c in cells])
    return 0


def cmd_quadrature(a) -> int:
    f = lambda x, y: np.exp(x + y)
    hs = a.h / 2.0 ** np.arange(a.levels)
    rows = {}
    for name in RULES:
        errs = quadrature_errors(name, f, hs)
        order = quadrature_error_order(name, f, a.h, a.levels)
        rows[name] = {"errors": errs.tolist(), "order": order,
                      "halving_ratios": (errs[1:] / errs[:-1]).tolist()}
        print(f"{name:<10} order {order:6.3f}")
    if a.out:
        _write_json(a.out, rows)
    return 0


COMMANDS = {
    "render": cmd_render, "fit": cmd_fit, "prune": cmd_prune, "metrics": cmd_metrics,
    "sort-error": cmd_sort_error, "aa-bench": cmd_aa_bench, "quadrature-check": cmd_quadrature,
}


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {act.dest for act in sub._actions}
        unknown = set(k.replace("-", "_") for k in cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    return args


def cli_main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return 2
        try:
            args = _parse(parser, argv)
        except SystemExit as e:  # --help
            return int(e.code or 0)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"surfelkit {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures become exit code 1
        print(f"surfelkit {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
