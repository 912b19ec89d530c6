"""Command-line entry points.

Subcommands: phantoms, distort, train, repair, baseline, eval, mesh,
experiment.  Global flags (--seed, --config, --out, --threads) come before
the subcommand name.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .distort import DistortionConfig, _read_config_file
from .model import ArchitectureConfig
from .phantoms import make_phantoms
from .pipeline import (
    CaseManifest,
    ExperimentConfig,
    _resolve,
    distort_dataset,
    evaluate_manifest,
    export_mesh,
    load_manifest,
    repair_dataset,
    run_experiment,
    save_manifest,
    sweep_baseline,
    train_from_manifest,
)
from .train import TrainConfig, load_checkpoint
from .volume import load_nvol, save_nvol


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="maskrepair",
        description="Repair imperfect 3D segmentation masks with an "
                    "appearance-conditioned implicit occupancy field.")
    parser.add_argument("--seed", type=int, default=0, help="base random seed")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON or key=value config file for the subcommand")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory (or file for `mesh`)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for per-case phases")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantoms", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)

    p = sub.add_parser("distort", help="corrupt every mask in a manifest")
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("train", help="fit the occupancy field to a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--shape-only", action="store_true",
                   help="drop the appearance input (shape-only variant)")

    p = sub.add_parser("repair", help="reconstruct repaired masks from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("baseline", help="morphological smoothing baseline")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--radii", type=int, nargs="+", default=[1, 2])

    p = sub.add_parser("eval", help="score predictions against gold masks")
    p.add_argument("--manifest", type=Path, required=True,
                   help="prediction manifest (gold via its gt_mask_path)")
    p.add_argument("--gt-manifest", type=Path, default=None,
                   help="optional separate gold manifest matched by case id")
    p.add_argument("--tolerance", type=float, default=1.0,
                   help="surface tolerance in mm")

    p = sub.add_parser("mesh", help="export an iso-surface mesh")
    p.add_argument("--input", type=Path, required=True, help="nvol header file")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--format", choices=("off", "stl"), default="off")

    sub.add_parser("experiment", help="run the full synthetic experiment")
    return parser


def _train_configs(args):
    arch_dict, train_dict = {}, {}
    if args.config is not None:
        raw = _read_config_file(args.config)
        arch_dict = raw.pop("arch", {})
        train_dict = raw
    arch = ArchitectureConfig.from_dict(arch_dict) if arch_dict \
        else ArchitectureConfig.desk()
    if train_dict:
        train_cfg = TrainConfig.from_dict({**train_dict, "seed": args.seed})
    else:
        # same desk-scale profile the experiment pipeline defaults to
        train_cfg = TrainConfig(train_grid=32, jitter_sigma=0.02, seed=args.seed)
    return arch, train_cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    out: Path = args.out

    if args.command == "phantoms":
        manifest = make_phantoms(args.n, args.resolution, args.seed, out)
        print(f"wrote {args.n} phantoms; manifest at {manifest}")

    elif args.command == "distort":
        cfg = DistortionConfig.from_file(args.config) if args.config \
            else DistortionConfig()
        manifest = distort_dataset(args.manifest, cfg, args.seed, out, args.threads)
        print(f"distorted manifest at {manifest}")

    elif args.command == "train":
        arch, train_cfg = _train_configs(args)
        if args.shape_only:
            arch.use_appearance = False
        out.mkdir(parents=True, exist_ok=True)
        ckpt = train_from_manifest(args.manifest, train_cfg, arch,
                                   out / "checkpoint.json")
        print(f"checkpoint at {out / 'checkpoint.json'} "
              f"(epoch {ckpt.selected_epoch}, loss {ckpt.selected_loss:.6f})")

    elif args.command == "repair":
        ckpt = load_checkpoint(args.checkpoint)
        manifest = repair_dataset(ckpt, args.manifest, out, args.threshold)
        print(f"repaired manifest at {manifest}")

    elif args.command == "baseline":
        records = load_manifest(args.manifest)
        base = args.manifest.parent
        cases = []
        for rec in records:
            mask = load_nvol(_resolve(base, rec.mask_path))
            gt = load_nvol(_resolve(base, rec.gt_mask_path)) if rec.gt_mask_path else None
            cases.append((rec.case_id, mask, gt))
        radius, smoothed = sweep_baseline(cases, tuple(args.radii))
        out.mkdir(parents=True, exist_ok=True)
        out_records = []
        for rec in records:
            path = save_nvol(smoothed[rec.case_id], out / f"{rec.case_id}_baseline.json")
            out_records.append(CaseManifest(
                case_id=rec.case_id, appearance_path=rec.appearance_path,
                mask_path=path.name,
                gt_mask_path=str(_resolve(base, rec.gt_mask_path)) if rec.gt_mask_path else None,
                label=rec.label))
        manifest = save_manifest(out_records, out / "manifest.json")
        print(f"baseline (radius {radius}) manifest at {manifest}")

    elif args.command == "eval":
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "eval.csv"
        reports = evaluate_manifest(args.manifest, csv_path, args.tolerance,
                                    args.gt_manifest)
        from .metrics import aggregate
        pct = aggregate(reports).as_percent_strings()
        print(f"eval CSV at {csv_path}: DSC {pct['dsc']}±{pct['dsc_std']} "
              f"NSD {pct['nsd']}±{pct['nsd_std']}")

    elif args.command == "mesh":
        grid = load_nvol(args.input)
        target = out if out.suffix else out / f"{args.input.stem}.{args.format}"
        export_mesh(grid, args.threshold, target, args.format)
        print(f"mesh at {target}")

    elif args.command == "experiment":
        cfg = ExperimentConfig.from_file(args.config) if args.config \
            else ExperimentConfig()
        run_experiment(cfg, out, args.seed, args.threads)
        print(f"experiment reports under {out / 'reports'}")

    return 0


if __name__ == "__main__":
    sys.exit(main())
