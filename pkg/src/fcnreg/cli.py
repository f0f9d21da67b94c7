"""Command-line surface.

Heavy imports happen inside the command handlers so ``--deterministic`` can
pin the BLAS thread count before numpy is loaded.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--deterministic", action="store_true",
                   help="single BLAS thread, fixed seeds, bit-reproducible runs")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--variant", choices=("multires", "no_pool", "coarse_interp"),
                   default=None, help="override the config architecture variant")
    p.add_argument("--verbose", action="store_true", help="log training progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcnreg",
        description="Self-supervised FCN-based 3D deformable image registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="dataset training over ordered image pairs")
    p.add_argument("--config", required=True)
    p.add_argument("--images", required=True,
                   help="directory of .nii volumes or comma-separated paths")
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--history", default=None,
                   help="loss history CSV (default: <out>.history.csv)")
    p.add_argument("--histmatch-template", default=None,
                   help="histogram-match all images to this volume first")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize", help="single-pair self-supervised registration")
    p.add_argument("--config", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out", required=True, help="final checkpoint path")
    p.add_argument("--history", default=None)
    p.add_argument("--histmatch", action="store_true",
                   help="histogram-match moving to the fixed image first")
    p.add_argument("--histmatch-template", default=None,
                   help="histogram-match both inputs to this volume first")
    _common_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("register", help="feedforward inference with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--out-warped", required=True)
    p.add_argument("--out-field", default=None)
    p.add_argument("--moving-labels", default=None)
    p.add_argument("--out-labels", default=None)
    p.add_argument("--histmatch", action="store_true")
    p.add_argument("--histmatch-template", default=None)
    _common_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="Dice overlap report for two label volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--labels", required=True, help="comma-separated label values")
    p.add_argument("--out", required=True, help="CSV report path")
    _common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="synthetic pair + ground-truth field + labels")
    p.add_argument("--dims", required=True, help="D,H,W")
    p.add_argument("--amplitude", type=float, required=True,
                   help="max displacement norm in voxels")
    p.add_argument("--sigma", type=float, required=True,
                   help="smoothing sigma of the field, in voxels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("meanvol", help="voxelwise mean of a set of volumes")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    _common_flags(p)
    p.set_defaults(func=cmd_meanvol)

    return parser


def _image_paths(spec: str) -> list[str]:
    if os.path.isdir(spec):
        names = sorted(n for n in os.listdir(spec) if n.endswith(".nii"))
        if not names:
            raise ValueError(f"no .nii volumes found in directory {spec}")
        return [os.path.join(spec, n) for n in names]
    return [p for p in spec.split(",") if p]


def _apply_overrides(config, args):
    if args.seed is not None:
        config.seed = args.seed
    if args.variant is not None:
        config.variant = args.variant
    if args.deterministic:
        config.deterministic = True
    return config


def _checkpoint_writer(out_path: str, config):
    from . import fileio

    def write(step, params, state):
        if step == config.iterations:
            return  # final checkpoint written by the caller
        fileio.save_checkpoint(f"{out_path}.step{step:06d}", params, state, config)

    return write


def _write_history(path: str, history) -> None:
    from .losses import LossReport

    with open(path, "w") as fh:
        fh.write(LossReport.csv_header() + "\n")
        for step, report in history:
            fh.write(report.csv_row(step) + "\n")


def _run_training(args, images, single_pair: bool):
    from . import fileio, training

    config = _apply_overrides(fileio.read_config(args.config), args)
    params, state, history = training.train(
        images, config, checkpoint_fn=_checkpoint_writer(args.out, config),
        single_pair=single_pair)
    fileio.save_checkpoint(args.out, params, state, config)
    history_path = args.history or f"{args.out}.history.csv"
    _write_history(history_path, history)
    final = history[-1][1]
    print(f"final loss {final.total:.6f} after {config.iterations} steps; "
          f"checkpoint {args.out}, history {history_path}")
    return 0


def cmd_train(args) -> int:
    from . import fileio
    from .volume import histogram_match

    paths = _image_paths(args.images)
    if len(paths) < 2:
        raise ValueError("training needs at least 2 images")
    images = [fileio.read_nifti(p) for p in paths]
    if args.histmatch_template:
        template = fileio.read_nifti(args.histmatch_template)
        images = [histogram_match(img, template) for img in images]
    return _run_training(args, images, single_pair=False)


def _load_pair(args):
    from . import fileio
    from .volume import histogram_match

    fixed = fileio.read_nifti(args.fixed)
    moving = fileio.read_nifti(args.moving)
    if getattr(args, "histmatch_template", None):
        template = fileio.read_nifti(args.histmatch_template)
        fixed = histogram_match(fixed, template)
        moving = histogram_match(moving, template)
    elif getattr(args, "histmatch", False):
        moving = histogram_match(moving, fixed)
    return fixed, moving


def cmd_optimize(args) -> int:
    fixed, moving = _load_pair(args)
    return _run_training(args, [fixed, moving], single_pair=True)


def cmd_register(args) -> int:
    from . import fileio
    from .network import predict_field
    from .warp import warp_labels_nearest, warp_trilinear

    if (args.moving_labels is None) != (args.out_labels is None):
        raise ValueError("--moving-labels and --out-labels must be given together")
    params, _, config = fileio.load_checkpoint(args.model)
    fixed, moving = _load_pair(args)
    field = predict_field(params, fixed, moving, config.pool_mode)
    warped = warp_trilinear(moving, field)
    fileio.write_nifti(warped, args.out_warped)
    outputs = [args.out_warped]
    if args.out_field:
        fileio.write_nifti(field, args.out_field)
        outputs.append(args.out_field)
    if args.moving_labels:
        labels = fileio.read_nifti(args.moving_labels, as_labels=True)
        fileio.write_nifti(warp_labels_nearest(labels, field), args.out_labels)
        outputs.append(args.out_labels)
    print("wrote " + ", ".join(outputs))
    return 0


def cmd_evaluate(args) -> int:
    from . import fileio
    from .evaluation import dice

    labels = [int(t) for t in args.labels.split(",") if t]
    a = fileio.read_nifti(args.a, as_labels=True)
    b = fileio.read_nifti(args.b, as_labels=True)
    report = dice(a, b, labels)
    with open(args.out, "w") as fh:
        fh.write("label,dice\n")
        fh.write(report.csv_text())
    print(f"mean Dice {report.mean:.4f} over {len(labels)} labels; wrote {args.out}")
    return 0


def cmd_synth(args) -> int:
    from . import fileio
    from .evaluation import make_sphere_labels, synth_base_volume, synth_deformation, synth_pair

    dims = tuple(int(t) for t in args.dims.split(","))
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"--dims expects D,H,W positive integers, got {args.dims!r}")
    os.makedirs(args.out, exist_ok=True)
    base = synth_base_volume(dims, args.seed)
    field = synth_deformation(dims, args.amplitude, args.sigma, args.seed + 1)
    labels = make_sphere_labels(dims, args.seed + 2)
    fixed, moving, moving_labels = synth_pair(base, field, labels)
    out = args.out
    fileio.write_nifti(fixed, os.path.join(out, "fixed.nii"))
    fileio.write_nifti(moving, os.path.join(out, "moving.nii"))
    fileio.write_nifti(field, os.path.join(out, "field.nii"))
    fileio.write_nifti(labels, os.path.join(out, "fixed_labels.nii"))
    fileio.write_nifti(moving_labels, os.path.join(out, "moving_labels.nii"))
    print(f"wrote synthetic pair to {out}")
    return 0


def cmd_meanvol(args) -> int:
    from . import fileio
    from .evaluation import mean_volume

    paths = _image_paths(args.images)
    volumes = [fileio.read_nifti(p) for p in paths]
    fileio.write_nifti(mean_volume(volumes), args.out)
    print(f"wrote mean of {len(volumes)} volumes to {args.out}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--deterministic" in argv:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"fcnreg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
