#!/usr/bin/env python3
"""
Command-line entry point for the hazy-scene detection toolkit.

Every command writes one JSON report to standard output and human-readable
progress to standard error. Exit codes: 0 success, 1 validation failure or
usage error, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    from . import decodet_kernels, losses  # noqa: F401  (register gradient cases)
    from .console import configure_console, get_console
    from .dataset_tools import (
        ToyDatasetConfig,
        depth_size_correlation,
        generate_toy_dataset,
        image_counts,
        instance_stats,
        load_manifest,
        parse_ratios,
        save_manifest,
        scale_histogram,
        stratified_split,
    )
    from .depth_pipeline import depth_summary, inject_noise, load_depth, save_depth
    from .evaluator import evaluate, load_detections, save_detections
    from .haze_synth import load_atmosphere_config, synthesize_dataset
    from .pdft_trainer import (
        ABLATION_VARIANTS,
        LOG_NAME,
        ablate,
        compare_finetuning,
        load_manifest_for,
        load_pdft_config,
        load_samples,
        load_stage_config,
        pdft,
        predict,
        run_stage,
    )
    from .tensor_core import gradcheck, registered_ops
    from .toy_detector import ToyConfig, ToyModel, load_checkpoint, save_checkpoint
except ImportError:
    import decodet_kernels  # noqa: F401
    import losses  # noqa: F401
    from console import configure_console, get_console
    from dataset_tools import (
        ToyDatasetConfig,
        depth_size_correlation,
        generate_toy_dataset,
        image_counts,
        instance_stats,
        load_manifest,
        parse_ratios,
        save_manifest,
        scale_histogram,
        stratified_split,
    )
    from depth_pipeline import depth_summary, inject_noise, load_depth, save_depth
    from evaluator import evaluate, load_detections, save_detections
    from haze_synth import load_atmosphere_config, synthesize_dataset
    from pdft_trainer import (
        ABLATION_VARIANTS,
        LOG_NAME,
        ablate,
        compare_finetuning,
        load_manifest_for,
        load_pdft_config,
        load_samples,
        load_stage_config,
        pdft,
        predict,
        run_stage,
    )
    from tensor_core import gradcheck, registered_ops
    from toy_detector import ToyConfig, ToyModel, load_checkpoint, save_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class CommandResult:
    report: dict | None
    exit_code: int = 0


def _emit(report: dict) -> None:
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _load_json(path: Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> CommandResult:
    console = get_console()
    config = load_atmosphere_config(args.config)
    source = load_manifest(args.source) if args.source else None
    console.rule("Haze synthesis")
    manifest, skipped = synthesize_dataset(
        args.input,
        args.depth,
        args.out,
        config,
        args.seed,
        source=source,
        depth_scale=args.depth_scale,
        threads=args.threads,
    )
    console.summary_table("Synthesis", [("Images", len(manifest.images)), ("Skipped", len(skipped)), ("Output", args.out)])
    console.skipped("images", skipped)
    return CommandResult({
        "images": len(manifest.images),
        "skipped": skipped,
        "manifest": str(Path(args.out) / "manifest.json"),
        "atmosphere": config.to_dict(),
        "base_seed": args.seed,
    }, 1 if skipped else 0)


def cmd_split(args) -> CommandResult:
    manifest = load_manifest(args.manifest)
    names = args.names.split(",") if args.names else None
    result = stratified_split(manifest, parse_ratios(args.ratios), args.seed, names)
    save_manifest(result, args.out)
    counts = {k: v for k, v in image_counts(result).items() if v}
    get_console().table("Split", ["Split", "Images"], sorted(counts.items()))
    return CommandResult({"counts": counts, "manifest": str(args.out), "seed": args.seed})


def cmd_stats(args) -> CommandResult:
    manifest = load_manifest(args.manifest)
    stats = instance_stats(manifest)
    rows = []
    for split, per_cat in stats.items():
        for category, groups in per_cat.items():
            if any(groups.values()):
                rows.append((split, category, groups["small"], groups["medium"], groups["large"]))
    get_console().table("Instances", ["Split", "Category", "Small", "Medium", "Large"], rows)
    return CommandResult({
        "images": image_counts(manifest),
        "instances": stats,
        "scale_histogram": scale_histogram(manifest, args.split),
    })


def cmd_correlate(args) -> CommandResult:
    report = depth_size_correlation(load_manifest(args.manifest), args.depth)
    get_console().summary_table("Depth vs. size", [("Spearman rho", report.rho), ("Samples", report.samples)])
    get_console().skipped("annotations", report.skipped)
    return CommandResult(report.to_dict())


def cmd_toygen(args) -> CommandResult:
    config = ToyDatasetConfig(
        num_images=args.images,
        resolution=args.resolution,
        objects_per_image=args.objects,
        seed=args.seed,
    )
    manifest = generate_toy_dataset(config, args.out, threads=args.threads)
    get_console().success(f"Wrote {len(manifest.images)} images to {args.out}")
    return CommandResult({
        "images": len(manifest.images),
        "annotations": len(manifest.annotations),
        "manifest": str(Path(args.out) / "manifest.json"),
        "info": manifest.info,
    })


def _model_from_args(args, seed: int | None) -> ToyModel:
    if getattr(args, "init", None):
        return load_checkpoint(args.init)
    config = ToyConfig.from_dict(_load_json(args.model_config))
    if seed is not None:
        config = replace(config, seed=seed)
    return ToyModel.init(config)


def cmd_train(args) -> CommandResult:
    stage = load_stage_config(args.stage)
    if args.seed is not None:
        stage = replace(stage, seed=args.seed)
    if args.frozen:
        stage = replace(stage, frozen_prefixes=tuple(args.frozen.split(",")))
    manifest = load_manifest_for(stage, args.manifest)
    model = _model_from_args(args, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME
    log_path.write_text("", encoding="utf-8")
    samples = load_samples(manifest, stage.split, model.config, args.threads)
    result = run_stage(model, samples, stage, args.name, log_path)
    save_checkpoint(result.model, out)
    return CommandResult({"checkpoint": str(out), "history": result.history, "stage": stage.to_dict()})


def cmd_pdft(args) -> CommandResult:
    config = load_pdft_config(args.config)
    if args.seed is not None:
        config = replace(
            config,
            stage1=replace(config.stage1, seed=args.seed),
            stage2=replace(config.stage2, seed=args.seed),
            model=replace(config.model, seed=args.seed),
        )
    model0 = ToyModel.init(config.model)
    result = pdft(model0, load_manifest(args.sim), load_manifest(args.real), config, args.out, args.threads)
    return CommandResult({
        "checkpoints": {k: str(v) for k, v in result.checkpoints.items()},
        "history": result.history,
        "stage2_lr": config.stage2.lr,
        "config": config.to_dict(),
    })


def cmd_predict(args) -> CommandResult:
    model = load_checkpoint(args.checkpoint)
    detections = predict(model, load_manifest(args.manifest), args.split, args.score, args.nms, args.threads)
    save_detections(detections, args.out)
    get_console().info(f"Wrote {len(detections)} detections to {args.out}")
    return CommandResult({"detections": len(detections), "predictions": str(args.out)})


def cmd_eval(args) -> CommandResult:
    report = evaluate(load_manifest(args.manifest), load_detections(args.preds), args.split, args.iou, args.sweep)
    rows = [(c, "undefined" if ap is None else f"{ap:.4f}") for c, ap in report.per_class_ap.items()]
    get_console().table(f"AP@{args.iou}", ["Class", "AP"], rows + [("mAP", f"{report.mAP:.4f}")])
    return CommandResult(report.to_dict())


def cmd_ablate(args) -> CommandResult:
    stage = load_stage_config(args.stage)
    config = ToyConfig.from_dict(_load_json(args.model_config))
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    report = ablate(
        load_manifest(args.manifest), config, stage, seeds, args.train_split, args.test_split, args.threads, variants
    )
    data = report.to_dict()
    get_console().table(
        "Component ablation",
        ["Variant", "Mean mAP", "Full >= variant"],
        [(v, data["mean_mAP"][v], f"{data['wins_vs_full'][v]}/{len(seeds)}" if v in data["wins_vs_full"] else "-")
         for v in report.scores],
    )
    return CommandResult(data)


def cmd_compare(args) -> CommandResult:
    config = load_pdft_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = compare_finetuning(
        load_manifest(args.sim), load_manifest(args.real), config, seeds, args.test_split, args.threads
    )
    data = result.to_dict()
    get_console().table("Fine-tuning strategies", ["Strategy", "Mean mAP"], list(data["mean_mAP"].items()))
    return CommandResult(data)


def cmd_gradcheck(args) -> CommandResult:
    ops = registered_ops() if args.op == "all" else [args.op]
    reports = [gradcheck(op, tolerance=args.tol, step=args.step, seed=args.seed) for op in ops]
    get_console().table(
        "Gradient check",
        ["Op", "Max rel. error", "Pass"],
        [(r.op_id, f"{r.max_rel_error:.3e}", "yes" if r.passed else "NO") for r in reports],
    )
    passed = all(r.passed for r in reports)
    return CommandResult({"ops": [r.to_dict() for r in reports], "pass": passed}, 0 if passed else 1)


def cmd_depth_check(args) -> CommandResult:
    summary = depth_summary(load_depth(args.file, args.scale))
    get_console().summary_table(str(args.file), list(summary.items()))
    return CommandResult({"file": str(args.file), **summary})


def cmd_depth_noise(args) -> CommandResult:
    depth = load_depth(args.file, args.scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for variance in args.variance:
        noisy = inject_noise(depth, variance, args.seed)
        path = out / f"{Path(args.file).stem}_var{variance:g}.pfm"
        save_depth(path, noisy)
        outputs.append({"variance": variance, "file": str(path), "mean_abs_change": float(np.mean(np.abs(noisy - depth)))})
    return CommandResult({"source": str(args.file), "seed": args.seed, "outputs": outputs})


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--no-color", action="store_true", help="Disable colored output")
    common.add_argument("--threads", type=int, default=None,
                        help="Worker threads for per-image work (default: machine parallelism)")

    parser = _Parser(
        prog="hazydet",
        description="Haze synthesis, depth-conditioned detection training and evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
    %(prog)s toygen --out toy --images 600 --seed 0
    %(prog)s split --manifest toy/manifest.json --ratios 5:1 --out toy/split.json
    %(prog)s synth --input clear/ --depth depth/ --out hazy/ --seed 7
    %(prog)s pdft --sim hazy/manifest.json --real real/manifest.json --config pdft.json --out run/
    %(prog)s gradcheck --op all --tol 1e-5
""")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="Render hazy images with the scattering model")
    p.add_argument("--input", type=Path, help="Directory of clear 8-bit RGB PNGs")
    p.add_argument("--depth", type=Path, help="Directory of depth rasters (.pfm or 16-bit .png)")
    p.add_argument("--source", type=Path, help="Manifest listing the clear images and annotations")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--config", type=Path, help="Atmosphere config JSON")
    p.add_argument("--depth-scale", type=float, default=None, help="Meters per unit for 16-bit PNG depth")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="Stratified train/val/test split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--ratios", default="8:1:2", help="Integer ratio parts (default: 8:1:2)")
    p.add_argument("--names", default=None, help="Comma-separated split names")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("stats", parents=[common], help="Instance and size-group census")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default=None, help="Restrict the scale histogram to one split")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("correlate", parents=[common], help="Depth vs. object size rank correlation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--depth", type=Path, default=None, help="Depth directory (default: manifest paths)")
    p.set_defaults(handler=cmd_correlate)

    p = sub.add_parser("toygen", parents=[common], help="Generate a procedural toy corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--images", type=int, default=100, help="Number of images to generate")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--objects", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_toygen)

    p = sub.add_parser("train", parents=[common], help="Run one training stage")
    p.add_argument("--manifest", type=Path, default=None, help="Dataset manifest (default: stage dataset)")
    p.add_argument("--stage", type=Path, default=None, help="Stage config JSON")
    p.add_argument("--model-config", type=Path, default=None, help="Toy model config JSON")
    p.add_argument("--init", type=Path, default=None, help="Start from this checkpoint")
    p.add_argument("--frozen", default=None, help="Comma-separated frozen parameter prefixes")
    p.add_argument("--name", default="stage", help="Stage name in the training log")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("pdft", parents=[common], help="Two-stage progressive domain fine-tuning")
    p.add_argument("--sim", type=Path, required=True, help="Simulated-haze manifest")
    p.add_argument("--real", type=Path, required=True, help="Real-haze manifest")
    p.add_argument("--config", type=Path, default=None, help="PDFT config JSON")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_pdft)

    p = sub.add_parser("predict", parents=[common], help="Write detections for a manifest split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--score", type=float, default=0.05, help="Score threshold (default: 0.05)")
    p.add_argument("--nms", type=float, default=0.5, help="NMS IoU threshold (default: 0.5)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="Per-class AP and mAP")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--preds", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--split", default=None)
    p.add_argument("--sweep", action="store_true", help="Also report mAP averaged over IoU 0.50:0.95")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="Paired component ablation over several seeds")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--stage", type=Path, default=None)
    p.add_argument("--model-config", type=Path, default=None)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--train-split", default="train")
    p.add_argument("--test-split", default="test")
    p.add_argument("--variants", default="full,no_dck",
                   help=f"Comma-separated variants ({', '.join(ABLATION_VARIANTS)}; default: full,no_dck)")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("compare", parents=[common], help="Direct vs. simulated-only vs. progressive fine-tuning")
    p.add_argument("--sim", type=Path, required=True, help="Simulated-haze manifest")
    p.add_argument("--real", type=Path, required=True, help="Real-haze manifest")
    p.add_argument("--config", type=Path, default=None, help="PDFT config JSON")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--test-split", default="real_test")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of backward passes")
    p.add_argument("--op", default="all", help=f"Op id or 'all' ({', '.join(registered_ops())})")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    depth = sub.add_parser("depth", help="Depth raster utilities")
    depth_sub = depth.add_subparsers(dest="depth_command", metavar="ACTION")
    p = depth_sub.add_parser("check", parents=[common], help="Validate a depth raster and summarize it")
    p.add_argument("--file", type=Path, required=True)
    p.add_argument("--scale", type=float, default=None)
    p.set_defaults(handler=cmd_depth_check)
    p = depth_sub.add_parser("noise", parents=[common], help="Write noisy copies of a depth raster")
    p.add_argument("--file", type=Path, required=True)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--variance", type=float, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_depth_noise)
    return parser


def dispatch(argv: Sequence[str]) -> CommandResult:
    """Parse ``argv``, run the selected command and map failures to exit codes."""
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return CommandResult(None, 1)
    if getattr(args, "handler", None) is None:
        sys.stderr.write(parser.format_help() if not argv else parser.format_usage())
        return CommandResult(None, 1)

    configure_console(no_color=args.no_color)
    console = get_console()
    try:
        return args.handler(args)
    except ValueError as e:
        console.error(f"Error: {e}")
        return CommandResult({"error": str(e), "exit_code": 1}, 1)
    except OSError as e:
        console.error(f"I/O error: {e}")
        return CommandResult({"error": str(e), "exit_code": 2}, 2)
    except RuntimeError as e:
        console.error(f"Error: {e}")
        return CommandResult({"error": str(e), "exit_code": 1}, 1)


def main(argv: Sequence[str] | None = None) -> int:
    result = dispatch(sys.argv[1:] if argv is None else argv)
    if result.report is not None:
        _emit(result.report)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
