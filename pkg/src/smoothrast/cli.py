"""Command-line interface.

    smoothrast render      --config scene.json [--out img.pgm ...] [--sweep s=5,200 o=5,200]
    smoothrast optimize    --config scene.json --targets DIR [--iters N]
    smoothrast gradcheck   --config scene.json [--probes N] [--step H] [--threshold T]
    smoothrast make-sphere --level K --out sphere.obj

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 frustum
violation, 4 target/camera mismatch, 5 gradient check above threshold.
"""

import argparse
import dataclasses
import csv
import datetime
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import config as config_mod
from .camera import FrustumError
from .losses import LossReport
from .images import ImageFormatError, read_image, write_image
from .mesh import ObjFormatError, apply_params, icosphere, save_obj
from .optim import OptimizationError, gradcheck_render, optimize
from .renderer import render

log = logging.getLogger("smoothrast")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FRUSTUM, EXIT_MISMATCH, EXIT_GRADCHECK = range(6)
TARGET_SUFFIXES = (".pgm", ".png")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _load_config(args):
    """Effective config: flag > file > default."""
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}: invalid JSON ({exc})", EXIT_CONFIG) from None
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object", EXIT_CONFIG)
    render_flags = {k: getattr(args, k, None) for k in ("s", "o")}
    render_flags = {k: v for k, v in render_flags.items() if v is not None}
    if render_flags:
        raw = {**raw, "render": {**raw.get("render", {}), **render_flags}}
    if getattr(args, "seed", None) is not None:
        raw = {**raw, "seed": args.seed}
    if getattr(args, "output_dir", None) is not None:
        raw = {**raw, "output_dir": args.output_dir}
    if getattr(args, "iters", None) is not None:
        raw = {**raw, "adam": {**raw.get("adam", {}), "max_iterations": args.iters}}
    return config_mod.resolve(raw)


def _mesh_and_views(cfg):
    mesh = config_mod.build_mesh(cfg)
    return mesh, config_mod.build_cameras(cfg), config_mod.build_render_params(cfg)


def _parse_sweep(items):
    values = {}
    for item in items:
        key, _, rest = item.partition("=")
        if key not in ("s", "o") or not rest:
            raise CliError(f"bad --sweep item {item!r}; expected s=a,b,... or o=a,b,...", EXIT_CONFIG)
        try:
            values[key] = [float(v) for v in rest.split(",")]
        except ValueError:
            raise CliError(f"bad --sweep values in {item!r}", EXIT_CONFIG) from None
        if any(v <= 0 for v in values[key]):
            raise CliError("--sweep values must be positive", EXIT_CONFIG)
    return values


def _fmt(x):
    return f"{x:g}"


def _indexed(path, k, n):
    """``path`` itself for a single view, else ``stem_v{k}.ext``."""
    path = Path(path)
    return path if n == 1 else path.with_name(f"{path.stem}_v{k}{path.suffix}")


# ---------------------------------------------------------------------------
# commands


def cmd_render(args):
    cfg = _load_config(args)
    mesh, cameras, params = _mesh_and_views(cfg)
    outs = args.out or [str(Path(cfg["output_dir"]) / "render.pgm")]
    if len(outs) not in (1, len(cameras)):
        raise CliError(f"{len(outs)} output paths for {len(cameras)} cameras", EXIT_CONFIG)

    jobs = []  # (path, params, camera)
    if args.sweep:
        grid = _parse_sweep(args.sweep)
        base = Path(outs[0])
        for s in grid.get("s", [params.s]):
            for o in grid.get("o", [params.o]):
                p = dataclasses.replace(params, s=s, o=o)
                named = base.with_name(f"{base.stem}_s{_fmt(s)}_o{_fmt(o)}{base.suffix}")
                for k, cam in enumerate(cameras):
                    jobs.append((_indexed(named, k, len(cameras)), p, cam))
    elif len(outs) == 1:
        jobs = [(_indexed(outs[0], k, len(cameras)), params, cam) for k, cam in enumerate(cameras)]
    else:
        jobs = [(Path(path), params, cam) for path, cam in zip(outs, cameras)]

    images = [(path, render(mesh, cam, p)) for path, p, cam in jobs]
    for path, img in images:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_image(path, img.values())
        log.info("wrote %s", path)
    config_mod.dump(cfg, Path(jobs[0][0]).parent / "effective_config.json")
    return EXIT_OK


def _read_targets(directory, cameras):
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"targets directory {directory} not found", EXIT_IO)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in TARGET_SUFFIXES)
    if len(files) != len(cameras):
        raise CliError(f"{len(files)} target images for {len(cameras)} cameras", EXIT_MISMATCH)
    targets = []
    for path, cam in zip(files, cameras):
        img = read_image(path)
        if img.shape != (cam.height, cam.width):
            raise CliError(
                f"{path.name}: {img.shape[1]}x{img.shape[0]} does not match camera {cam.width}x{cam.height}",
                EXIT_MISMATCH,
            )
        targets.append((img, cam))
    return targets


def _params_json(params):
    return {
        "raw_offsets": np.asarray(params.raw_offsets, dtype=float).tolist(),
        "translation": np.asarray(params.translation, dtype=float).tolist(),
        "log_scale": float(np.asarray(params.log_scale)),
        "max_offset": params.max_offset,
        "symmetry": params.symmetry is not None,
    }


def cmd_optimize(args):
    cfg = _load_config(args)
    base, cameras, params = _mesh_and_views(cfg)
    try:
        init = config_mod.build_init(cfg, base)
    except ValueError as exc:
        raise CliError(f"shape: {exc}", EXIT_CONFIG) from None
    targets = _read_targets(args.targets, cameras)
    adam = config_mod.build_adam(cfg)

    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = Path(cfg["output_dir"]) / f"{stamp}_seed{cfg['seed']}"
    run_dir.mkdir(parents=True, exist_ok=False)
    handler = logging.FileHandler(run_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    try:
        final, trace = optimize(base, targets, params, config_mod.build_loss_weights(cfg), adam, init)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()

    with open(run_dir / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iter",) + LossReport.CSV_COLUMNS)
        for row in trace.csv_rows():
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    snap_dir = run_dir / "snapshots"
    for it, vec in sorted(trace.snapshots.items()):
        snap_dir.mkdir(exist_ok=True)
        p = init.with_vector(vec)
        save_obj(apply_params(base, p), snap_dir / f"iter_{it:06d}.obj")
        with open(snap_dir / f"iter_{it:06d}.json", "w") as fh:
            json.dump(_params_json(p), fh)
    final_mesh = apply_params(base, final)
    save_obj(final_mesh, run_dir / "final.obj")
    with open(run_dir / "final_params.json", "w") as fh:
        json.dump(_params_json(final), fh)
    for k, cam in enumerate(cameras):
        write_image(run_dir / f"final_v{k}.pgm", render(final_mesh, cam, params).values())
    config_mod.dump(cfg, run_dir / "effective_config.json")
    print(run_dir)
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load_config(args)
    gc = cfg["gradcheck"]
    probes = args.probes if args.probes is not None else gc["probes"]
    step = args.step if args.step is not None else gc["step"]
    threshold = args.threshold if args.threshold is not None else gc["threshold"]
    if probes < 1 or not step > 0 or threshold < 0:
        raise CliError("--probes must be >= 1, --step > 0, --threshold >= 0", EXIT_CONFIG)
    mesh, cameras, params = _mesh_and_views(cfg)
    report = gradcheck_render(mesh, cameras[0], params, probes, step, seed=cfg["seed"])
    print(report.table())
    print(f"max relative error {report.max_rel_err:.3g} (threshold {threshold:g})")
    return EXIT_OK if report.max_rel_err < threshold else EXIT_GRADCHECK


def cmd_make_sphere(args):
    try:
        mesh = icosphere(args.level)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_obj(mesh, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="smoothrast", description="Smooth differentiable triangle rasterizer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON scene config")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--s", type=float, help="edge steepness")
        p.add_argument("--o", type=float, help="opacity")

    p = sub.add_parser("render", help="render the configured mesh from every camera")
    common(p)
    p.add_argument("--out", nargs="+", help="output image path(s): .pgm, .png or .raw")
    p.add_argument("--sweep", nargs="+", metavar="KEY=V,V", help="grid over s and o, e.g. s=5,200 o=5,200")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("optimize", help="fit shape parameters to target images")
    common(p)
    p.add_argument("--targets", required=True, help="directory with one image per camera, in sorted order")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("gradcheck", help="compare reverse-mode and finite-difference gradients")
    common(p)
    p.add_argument("--probes", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-sphere", help="write an icosphere OBJ")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_sphere)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FrustumError as exc:
        print(f"frustum error: {exc}", file=sys.stderr)
        return EXIT_FRUSTUM
    except OptimizationError as exc:
        if isinstance(exc.__cause__, FrustumError):
            print(f"frustum error: {exc}", file=sys.stderr)
            return EXIT_FRUSTUM
        print(f"optimization failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ObjFormatError, ImageFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
