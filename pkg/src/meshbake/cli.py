"""Command-line pipeline: synth, train-geometry, train-appearance, export,
eval. Flags may come from the command line or a JSON config file; the file
wins conflicts (with a warning). Exit codes: 0 success, 2 validation,
3 divergence, 4 I/O.

Heavy imports happen inside commands so --threads can cap BLAS workers
before numpy loads.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

PROFILES = ("desk", "full")


def _apply_threads(n):
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _merge_config(args, actions):
    """Overlay a JSON config file onto parsed args; file values win."""
    if not getattr(args, "config", None):
        return args
    allowed = {a.dest for a in actions if a.dest != "help"}
    with open(args.config) as fh:
        cfg = json.load(fh)
    for key, value in cfg.items():
        if key not in allowed:
            raise SystemExit(
                f"error: unknown config key {key!r} (allowed: {sorted(allowed)})")
        current = getattr(args, key, None)
        default = _default_of(actions, key)
        if current != default and current != value:
            print(f"warning: config file overrides --{key.replace('_', '-')} "
                  f"({current!r} -> {value!r})", file=sys.stderr)
        setattr(args, key, value)
    return args


def _default_of(actions, dest):
    for a in actions:
        if a.dest == dest:
            return a.default
    return None


def _geometry_profile(profile):
    from .grids import desk_schedule

    if profile == "full":
        # Densest grid stack that dense storage affords; the published
        # hash-backed 16-level/4096 config needs hash grids, a non-goal.
        return {"schedule": desk_schedule(levels=10, base=16, top=512),
                "steps": 6000, "batch_rays": 512, "n_samples": 48,
                "extract_res": 384}
    return {"schedule": desk_schedule(), "steps": 2000, "batch_rays": 256,
            "n_samples": 24, "extract_res": 128}


def _appearance_profile(profile):
    if profile == "full":
        return {"texture_res": 1024, "steps": 10000, "batch_px": 8192}
    return {"texture_res": 256, "steps": 3000, "batch_px": 4096}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from .dataset import SceneSpec, generate_synthetic_scene, save_dataset

    spec = SceneSpec(primitive=args.primitive, albedo=args.albedo,
                     lobe=args.lobe, n_views=args.views, resolution=args.res)
    dataset = generate_synthetic_scene(spec)
    out = Path(args.out)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset.frames)} frames to {out}")
    return 0


def cmd_train_geometry(args):
    from .dataset import load_dataset
    from .geometry import (GeometryLossWeights, GeometryTrainConfig,
                           extract_mesh, load_geometry, save_geometry,
                           train_geometry)
    from .meshes import write_obj
    from .reporting import save_loss_curves, write_csv

    dataset = load_dataset(args.data)
    prof = _geometry_profile(args.profile)
    steps = args.steps if args.steps is not None else prof["steps"]
    config = GeometryTrainConfig(
        steps=steps, batch_rays=prof["batch_rays"], n_samples=prof["n_samples"],
        seed=args.seed, use_depth_priors=not args.no_depth_priors,
        freeze_beta=args.freeze_beta)
    field = None
    start_step = 0
    if args.resume:
        field, meta = load_geometry(args.resume)
        start_step = int(meta.get("step") or 0)
        config.steps = max(config.steps, start_step)
        print(f"resuming from {args.resume} at step {start_step}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def progress(entry):
        print(f"[geometry] step {entry['step']:5d}  total {entry['total']:.5f}  "
              f"rgb {entry['rgb']:.5f}  beta {entry['beta']:.2f}", flush=True)

    field, history = train_geometry(dataset, schedule=prof["schedule"],
                                    weights=GeometryLossWeights(),
                                    config=config, field=field,
                                    start_step=start_step, progress=progress)
    save_geometry(field, out / "geometry.npz", step=config.steps)
    if history:
        write_csv(out / "loss_curve.csv", history)
        save_loss_curves(history, out / "loss_curve.png")

    extract_res = args.extract_res or prof["extract_res"]
    mesh = extract_mesh(field, resolution=extract_res)
    write_obj(out / "mesh.obj", mesh)
    print(f"trained to step {config.steps} in {time.time() - t0:.1f}s; "
          f"mesh: {mesh.n_vertices} vertices, {mesh.n_faces} faces -> {out}")
    return 0


def cmd_train_appearance(args):
    from .appearance import (AppearanceTrainConfig, save_appearance,
                             train_appearance)
    from .dataset import load_dataset
    from .meshes import read_obj, simplify_mesh
    from .raster import atlas_capacity
    from .reporting import save_psnr_curve, write_csv

    dataset = load_dataset(args.data)
    mesh, _ = read_obj(args.mesh)
    prof = _appearance_profile(args.profile)
    steps = args.steps if args.steps is not None else prof["steps"]
    texture_res = args.texture_res or prof["texture_res"]
    cap = atlas_capacity(texture_res)
    if mesh.n_faces > cap:
        print(f"simplifying mesh to fit the {texture_res}px atlas: "
              f"{mesh.n_faces} -> <= {cap} faces")
        mesh = simplify_mesh(mesh, cap)
    config = AppearanceTrainConfig(
        channels=args.channels, alpha=args.alpha,
        texture_res=texture_res, steps=steps,
        batch_px=prof["batch_px"], seed=args.seed,
        encoding_enabled=not args.no_view_encoding,
        holdout_every=args.holdout_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def progress(entry):
        line = f"[appearance] step {entry['step']:5d}  loss {entry['loss']:.6f}"
        if "holdout_psnr" in entry:
            line += f"  holdout PSNR {entry['holdout_psnr']:.2f} dB"
        print(line, flush=True)

    model, history = train_appearance(dataset, mesh, config=config,
                                      progress=progress)
    save_appearance(model, out / "appearance.npz", extra={"steps": config.steps})
    write_csv(out / "psnr_curve.csv", history)
    save_psnr_curve(history, out / "psnr_curve.png")
    print(f"trained {config.steps} steps in {time.time() - t0:.1f}s -> {out}")
    return 0


def cmd_export(args):
    from .appearance import load_appearance
    from .packaging import export_model
    from .reporting import write_csv

    model = load_appearance(args.appearance)
    report = export_model(model, args.out)
    out = Path(args.out)
    with open(out / "size_report.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    write_csv(out / "size_report.csv",
              [{"component": k, "bytes": v}
               for k, v in sorted(report.components.items())]
              + [{"component": "total", "bytes": report.total}])
    print(report.table())
    return 0


def cmd_eval(args):
    import numpy as np

    from .dataset import load_dataset
    from .metrics import MetricReport, chamfer, error_map, psnr, ssim
    from .reporting import save_image, save_metric_figure, write_csv

    t0 = time.time()
    dataset = load_dataset(args.data)
    frames = dataset.frames[:args.max_views] if args.max_views else dataset.frames
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model = None
    if args.self_check:
        renders = [fr.image for fr in frames]
    else:
        if args.package:
            from .packaging import import_package
            model = import_package(args.package)
        elif args.appearance:
            from .appearance import load_appearance
            model = load_appearance(args.appearance)
        else:
            raise SystemExit("error: eval needs --package, --appearance, or --self")
        from .appearance import render_model
        renders = [render_model(model, fr.camera) for fr in frames]

    report = MetricReport()
    rows = []
    for i, (fr, render) in enumerate(zip(frames, renders)):
        p = psnr(render, fr.image)
        s = ssim(render, fr.image)
        report.psnr_per_view.append(p)
        report.ssim_per_view.append(s)
        rows.append({"view": i, "psnr_db": p, "ssim": s})
        save_image(out / f"error_map_{i:03d}.png",
                   error_map(render, fr.image, max_error=args.error_scale))
    finite = [p for p in report.psnr_per_view if np.isfinite(p)]
    report.psnr_mean = float(np.mean(finite)) if finite else float("inf")
    report.ssim_mean = float(np.mean(report.ssim_per_view))

    if args.ref_mesh and model is not None:
        from .meshes import read_obj
        ref, _ = read_obj(args.ref_mesh)
        report.chamfer = chamfer(model.mesh, ref, n_points=args.chamfer_points)
        report.chamfer_milli = report.chamfer * 1000.0
    report.runtime_seconds = time.time() - t0

    with open(out / "metrics.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
    write_csv(out / "metrics.csv", rows)
    save_metric_figure(report, out / "per_view_quality.png")
    print(f"PSNR mean {report.psnr_mean:.2f} dB  SSIM mean {report.ssim_mean:.4f}")
    if np.isfinite(report.chamfer):
        print(f"Chamfer {report.chamfer_milli:.3f} (x10^-3 world units)")
    print(f"eval wrote {len(rows)} views to {out} "
          f"in {report.runtime_seconds:.1f}s")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/OpenMP worker threads")
    sp.add_argument("--profile", choices=PROFILES, default="desk")
    sp.add_argument("--config", default=None,
                    help="JSON config file; overrides flags with a warning")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="meshbake",
        description="Two-stage SDF reconstruction and view-aware texture baking")
    subs = parser.add_subparsers(dest="command")

    sp = subs.add_parser("synth", help="generate a synthetic oracle dataset")
    sp.add_argument("--primitive", default="sphere",
                    choices=("sphere", "box", "bowl"))
    sp.add_argument("--albedo", default="checker", choices=("checker", "solid"))
    sp.add_argument("--lobe", type=float, default=0.0)
    sp.add_argument("--views", type=int, default=50)
    sp.add_argument("--res", type=int, default=128)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_synth, _subparser=sp)

    sp = subs.add_parser("train-geometry", help="stage-1 SDF training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--resume", default=None)
    sp.add_argument("--extract-res", type=int, default=None)
    sp.add_argument("--no-depth-priors", action="store_true")
    sp.add_argument("--freeze-beta", type=float, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_train_geometry, _subparser=sp)

    sp = subs.add_parser("train-appearance", help="stage-2 texture baking")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--channels", type=int, default=12)
    sp.add_argument("--alpha", type=float, default=0.3)
    sp.add_argument("--texture-res", type=int, default=None)
    sp.add_argument("--holdout-every", type=int, default=10)
    sp.add_argument("--no-view-encoding", action="store_true")
    _add_common(sp)
    sp.set_defaults(func=cmd_train_appearance, _subparser=sp)

    sp = subs.add_parser("export", help="write the render package")
    sp.add_argument("--appearance", required=True)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_export, _subparser=sp)

    sp = subs.add_parser("eval", help="metrics, error maps, figures")
    sp.add_argument("--data", required=True)
    sp.add_argument("--package", default=None)
    sp.add_argument("--appearance", default=None)
    sp.add_argument("--self", dest="self_check", action="store_true",
                    help="sanity mode: compare the dataset against itself")
    sp.add_argument("--ref-mesh", default=None,
                    help="OBJ reference mesh for Chamfer distance")
    sp.add_argument("--chamfer-points", type=int, default=100_000)
    sp.add_argument("--max-views", type=int, default=None)
    sp.add_argument("--error-scale", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_eval, _subparser=sp)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(getattr(args, "threads", None))
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        args = _merge_config(args, args._subparser._actions)
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        from .errors import (CapacityError, DivergenceError, EmptyMeshError,
                             FormatError, UsageError, ValidationError)

        if isinstance(exc, DivergenceError):
            print(f"divergence: {exc}", file=sys.stderr)
            return 3
        if isinstance(exc, (ValidationError, FormatError, CapacityError,
                            EmptyMeshError, UsageError)):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if isinstance(exc, OSError):
            print(f"io error: {exc}", file=sys.stderr)
            return 4
        raise


if __name__ == "__main__":
    sys.exit(main())
