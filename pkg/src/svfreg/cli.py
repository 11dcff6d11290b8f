"""Command-line surface.

Subcommands cover the whole pipeline: ``phantom`` generates synthetic
cases, ``train`` pretrains a predictor, ``register`` runs pure inference,
``adapt`` runs uncertainty-aware test-time adaptation, ``eval`` computes
metrics for one case, and ``report`` aggregates metric files into a CSV.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Existing outputs are never overwritten without --force. Every run writes a
manifest sufficient to reproduce it.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import __version__
from .diffeo import DisplacementField
from .engine import AdaptConfig, NumericalFailure, adapt, pretrain, register
from .grid import ScalarVolume, VectorField
from .metrics import evaluate_registration, read_metrics_json, write_metrics_csv
from .phantom import make_phantom_pair
from .predictor import load_checkpoint, save_checkpoint
from .volio import (RunManifest, VolumeFormatError, read_json, read_volume,
                    write_json, write_manifest, write_volume)


class DataError(Exception):
    """Unusable input or output location (exit code 3)."""


def _ensure_free(paths, force: bool) -> None:
    if force:
        return
    clashes = [str(p) for p in paths if Path(p).exists()]
    if clashes:
        raise DataError(f"refusing to overwrite existing outputs: {clashes} "
                        "(use --force)")


def _read_scalar(path) -> ScalarVolume:
    vol = read_volume(path)
    if not isinstance(vol, ScalarVolume):
        raise DataError(f"{path} holds a vector field, expected a scalar volume")
    return vol


def _read_field(path) -> VectorField:
    fld = read_volume(path)
    if not isinstance(fld, VectorField):
        raise DataError(f"{path} holds a scalar volume, expected a vector field")
    return fld


def _parse_scale(text: str):
    if ":" in text:
        lo, hi = (float(t) for t in text.split(":", 1))
        return lo, hi
    value = float(text)
    return value, value


def _direction(flag: str) -> str:
    return {"fwd": "forward", "inv": "inverse"}[flag]


def _add_hyperparams(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.0002, help="learning rate")
    p.add_argument("--reg-weight", type=float, default=0.2,
                   help="regularization weight")
    p.add_argument("--squaring-steps", type=int, default=10,
                   help="scaling-and-squaring steps")
    p.add_argument("--dropout", type=float, default=0.2, help="dropout rate")
    p.add_argument("--regularize", choices=("displacement", "velocity"),
                   default="displacement")


def cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = _parse_scale(args.scale)
    dims = (args.dims,) * 3
    cases = []
    paths = [out / "cases.json", out / "manifest.json"]
    for i in range(args.count):
        cid = f"case_{i:03d}"
        paths += [out / f"{cid}_{k}.dvol" for k in
                  ("fixed", "moving", "fixed_mask", "moving_mask", "velocity")]
    _ensure_free(paths, args.force)

    for i in range(args.count):
        cid = f"case_{i:03d}"
        scale = lo + (hi - lo) * (i / max(args.count - 1, 1))
        case = make_phantom_pair(dims, radial_scale=scale,
                                 random_amplitude=args.random_amplitude,
                                 smoothness=args.smoothness,
                                 seed=args.seed + 1000 * i,
                                 squaring_steps=args.squaring_steps)
        files = {}
        for kind, vol in (("fixed", case.fixed), ("moving", case.moving),
                          ("fixed_mask", case.fixed_mask),
                          ("moving_mask", case.moving_mask),
                          ("velocity", case.true_velocity)):
            fname = f"{cid}_{kind}.dvol"
            write_volume(out / fname, vol, name=f"{cid}:{kind}")
            files[kind] = fname
        cases.append({"case_id": cid, "files": files,
                      "radial_scale": case.radial_scale,
                      "volume_change": case.volume_change,
                      "seed": case.seed})
    write_json(out / "cases.json", {"dims": list(dims), "cases": cases})
    write_manifest(out / "manifest.json", RunManifest(
        command="phantom", version=__version__,
        config={"count": args.count, "dims": args.dims, "scale": args.scale,
                "random_amplitude": args.random_amplitude,
                "smoothness": args.smoothness,
                "squaring_steps": args.squaring_steps},
        seeds={"base": args.seed},
        outputs={"dir": str(out)}))
    print(f"wrote {args.count} cases to {out}")
    return 0


def _load_pairs(data_dir: Path):
    listing = read_json(data_dir / "cases.json")
    pairs = []
    for entry in listing["cases"]:
        fixed = _read_scalar(data_dir / entry["files"]["fixed"])
        moving = _read_scalar(data_dir / entry["files"]["moving"])
        pairs.append((fixed, moving))
    return pairs


def cmd_train(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curve_path = out.with_suffix(out.suffix + ".losses.json")
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    _ensure_free([out, curve_path, manifest_path], args.force)

    pairs = _load_pairs(Path(args.data))
    config = AdaptConfig(reg_weight=args.reg_weight,
                         squaring_steps=args.squaring_steps,
                         learning_rate=args.lr, dropout_rate=args.dropout,
                         regularize=args.regularize, seed=args.seed)
    params, curve = pretrain(pairs, config, args.epochs, args.seed)
    save_checkpoint(out, params)
    write_json(curve_path, {"loss_curve": curve})
    write_manifest(manifest_path, RunManifest(
        command="train", version=__version__,
        config={**config.to_dict(), "epochs": args.epochs},
        seeds={"train": args.seed},
        inputs={"data": str(args.data)},
        outputs={"checkpoint": str(out)}))
    print(f"trained {args.epochs} epochs: loss {curve[0]:.6f} -> {curve[-1]:.6f}")
    return 0


def cmd_register(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    disp_path, warped_path = out / "displacement.dvol", out / "warped.dvol"
    manifest_path = out / "manifest.json"
    _ensure_free([disp_path, warped_path, manifest_path], args.force)

    params = load_checkpoint(args.ckpt)
    fixed, moving = _read_scalar(args.fixed), _read_scalar(args.moving)
    direction = _direction(args.direction)
    disp, warped = register(params, fixed, moving, direction, args.squaring_steps)
    write_volume(disp_path, disp.field, name=f"displacement:{direction}")
    write_volume(warped_path, warped, name=f"warped:{direction}")
    _maybe_warp_mask(args, out, disp, direction)
    write_manifest(manifest_path, RunManifest(
        command="register", version=__version__,
        config={"direction": direction, "squaring_steps": args.squaring_steps},
        inputs={"ckpt": str(args.ckpt), "fixed": str(args.fixed),
                "moving": str(args.moving)},
        outputs={"displacement": str(disp_path), "warped": str(warped_path)}))
    print(f"registered ({direction}) -> {out}")
    return 0


def _maybe_warp_mask(args, out: Path, disp, direction: str) -> None:
    """Warp the source-side mask (moving mask for forward, fixed mask for
    inverse) alongside the image when --mask is given."""
    if not getattr(args, "mask", None):
        return
    from .metrics import warp_mask
    mask = _read_scalar(args.mask)
    warped = warp_mask(mask, disp)
    write_volume(out / "warped_mask.dvol", warped, name=f"warped_mask:{direction}")


def cmd_adapt(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ("displacement.dvol", "warped.dvol", "adapted.ckpt", "report.json",
             "timing.json", "variance.dvol", "weight.dvol", "manifest.json")
    _ensure_free([out / n for n in names]
                 + ([out / "warped_mask.dvol"] if args.mask else []), args.force)

    params = load_checkpoint(args.ckpt)
    fixed, moving = _read_scalar(args.fixed), _read_scalar(args.moving)
    direction = _direction(args.direction)
    config = AdaptConfig(reg_weight=args.reg_weight,
                         squaring_steps=args.squaring_steps,
                         mc_samples=args.mc_samples, adapt_steps=args.steps,
                         learning_rate=args.lr, dropout_rate=args.dropout,
                         variance_floor=args.variance_floor,
                         direction=direction, seed=args.seed,
                         regularize=args.regularize,
                         refresh_every=args.refresh_uncertainty)
    t0 = time.perf_counter()
    adapted, report = adapt(params, fixed, moving, config)
    disp, warped = register(adapted, fixed, moving, direction, args.squaring_steps)

    write_volume(out / "displacement.dvol", disp.field, name=f"displacement:{direction}")
    write_volume(out / "warped.dvol", warped, name=f"warped:{direction}")
    _maybe_warp_mask(args, out, disp, direction)
    save_checkpoint(out / "adapted.ckpt", adapted)
    write_volume(out / "variance.dvol", report.uncertainty.variance, name="variance")
    write_volume(out / "weight.dvol", report.uncertainty.weight, name="weight")
    # wall-clock lives in timing.json only, so report.json is bit-reproducible
    write_json(out / "report.json", {
        "direction": direction,
        "config": config.to_dict(),
        "trajectory": report.trajectory(),
        "inputs": {"ckpt": str(args.ckpt), "fixed": str(args.fixed),
                   "moving": str(args.moving)},
    })
    write_json(out / "timing.json", {
        "step_seconds": report.step_seconds,
        "total_seconds": time.perf_counter() - t0,
    })
    write_manifest(out / "manifest.json", RunManifest(
        command="adapt", version=__version__, config=config.to_dict(),
        seeds={"adapt": args.seed},
        inputs={"ckpt": str(args.ckpt), "fixed": str(args.fixed),
                "moving": str(args.moving)},
        outputs={n: str(out / n) for n in names if n != "manifest.json"}))
    if report.steps:
        print(f"adapted {config.adapt_steps} steps ({direction}): "
              f"loss {report.steps[0].total:.6f} -> {report.steps[-1].total:.6f}")
    else:
        print("adaptation skipped (0 steps); wrote unadapted registration")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _ensure_free([out], args.force)

    fixed_mask = _read_scalar(args.fixed_mask)
    warped_mask = _read_scalar(args.warped_mask)
    disp = DisplacementField(_read_field(args.disp))
    disp_inv = None
    if args.disp_inverse:
        disp_inv = DisplacementField(_read_field(args.disp_inverse), "inverse")
    report = evaluate_registration(fixed_mask, warped_mask, disp, disp_inv,
                                   case_id=args.case_id,
                                   direction=_direction(args.direction))
    payload = report.to_dict()
    if args.adapt_steps is not None:
        payload["adapt_steps"] = args.adapt_steps
    write_json(out, payload)
    write_manifest(Path(str(out) + ".manifest.json"), RunManifest(
        command="eval", version=__version__,
        config={"direction": _direction(args.direction),
                "adapt_steps": args.adapt_steps},
        inputs={"fixed_mask": str(args.fixed_mask),
                "warped_mask": str(args.warped_mask), "disp": str(args.disp),
                "disp_inverse": str(args.disp_inverse or "")},
        outputs={"report": str(out)}))
    print(f"{report.case_id or args.fixed_mask}: DSC {report.dsc:.4f}, "
          f"ASSD {report.assd_mm:.4f} mm, folding {report.folding_pct:.3f}%")
    return 0


def cmd_report(args) -> int:
    root = Path(args.indir)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(set(root.rglob("*.metrics.json")) | set(root.rglob("metrics.json")))
    if not files:
        raise DataError(f"no *.metrics.json files under {root}")
    rows = [read_metrics_json(f) for f in files]
    _ensure_free([args.csv, str(args.csv) + ".manifest.json"], args.force)
    write_metrics_csv(args.csv, rows)
    write_manifest(Path(str(args.csv) + ".manifest.json"), RunManifest(
        command="report", version=__version__,
        inputs={"dir": str(root), "files": [str(f) for f in files]},
        outputs={"csv": str(args.csv)}))
    print(f"aggregated {len(rows)} reports -> {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svfreg",
        description="Diffeomorphic registration with velocity-field prediction, "
                    "uncertainty estimation, and test-time adaptation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic phantom cases")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--dims", type=int, default=32, help="cubic grid size")
    p.add_argument("--scale", default="0.85",
                   help="radial contraction scale, value or lo:hi sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--random-amplitude", type=float, default=1.0)
    p.add_argument("--smoothness", type=float, default=4.0)
    p.add_argument("--squaring-steps", type=int, default=10)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="pretrain a predictor on phantom pairs")
    p.add_argument("--data", required=True, help="phantom directory")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    _add_hyperparams(p)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="pure inference registration")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--direction", choices=("fwd", "inv"), default="fwd")
    p.add_argument("--mask", default=None,
                   help="source-side mask to warp alongside the image")
    p.add_argument("--squaring-steps", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("adapt", help="uncertainty-aware test-time adaptation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--mc-samples", type=int, default=20)
    p.add_argument("--direction", choices=("fwd", "inv"), default="fwd")
    p.add_argument("--mask", default=None,
                   help="source-side mask to warp alongside the image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variance-floor", type=float, default=1e-6)
    p.add_argument("--refresh-uncertainty", type=int, default=0, metavar="N",
                   help="re-estimate the weight map every N steps (0 = frozen)")
    _add_hyperparams(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="metrics for one registered case")
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--warped-mask", required=True)
    p.add_argument("--disp", required=True)
    p.add_argument("--disp-inverse", default=None)
    p.add_argument("--case-id", default="")
    p.add_argument("--direction", choices=("fwd", "inv"), default="fwd")
    p.add_argument("--adapt-steps", type=int, default=None,
                   help="label for the aggregate CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate *.metrics.json into a CSV")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def cli(argv=None) -> int:
    """Run the CLI; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, VolumeFormatError, FileNotFoundError, IsADirectoryError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
