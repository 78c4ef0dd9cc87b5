"""
Command line: skeletal-radiance <command> [options]

    gen-data   render a synthetic capture set to disk
    train      train a field and write a checkpoint
    render     render one frame of a subject from a rig or orbit camera
    eval       score a checkpoint on a protocol and write the metric CSV
    gradcheck  run the finite-difference gradient suite
    ablate     train and compare every variant, or sweep the input view count

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .ablation import AblationRunner, sweep_views
from .config import PROTOCOLS, VARIANTS, RunConfig, load_config, resolve_threads
from .dataset import CAMERA_DISTANCE, CAMERA_TARGET, generate_captures, read_dataset, read_manifest, write_dataset
from .errors import NonFiniteLossError, SkeletalRadianceError
from .evaluate import Evaluator, Split
from .geometry import orbit_camera
from .gradcheck import run_gradient_suite
from .log import setup_logging
from .metrics import psnr, ssim
from .render import render_image, write_alpha, write_image
from .train import Trainer, checkpoint_load

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-q", "--quiet", action="count", default=0, help="warnings and errors only")


def _add_threads(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=int, default=None,
                        help="render threads (default: NHP_THREADS, then the config file, then 1)")


def _add_field_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("ablation flags")
    group.add_argument("--variant", choices=VARIANTS, help="field variant, overrides the flags below")
    group.add_argument("--no-skeletal", dest="enable_skeletal", action="store_const", const=False)
    group.add_argument("--no-pixel", dest="enable_pixel_aligned", action="store_const", const=False)
    group.add_argument("--no-temporal", dest="enable_temporal_transformer", action="store_const", const=False)
    group.add_argument("--no-multiview", dest="enable_multiview_transformer", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skeletal-radiance",
                                     description="Generalizable skeletal radiance fields on synthetic performers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic capture set")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", type=Path, default=Path("data"), help="dataset directory")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a field")
    _add_common(p)
    p.add_argument("--data", type=Path, help="dataset directory (default: [data] data_dir)")
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--rays", type=int, dest="rays_per_step")
    p.add_argument("--samples", type=int, dest="samples_per_ray")
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--memory-offset", type=int, dest="memory_offset")
    _add_field_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("render", help="render one frame")
    _add_common(p)
    _add_threads(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subject", help="subject name (default: the first in the manifest)")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", type=int, help="rig camera index (default: the first held-out view)")
    p.add_argument("--azimuth", type=float, help="orbit camera azimuth in degrees")
    p.add_argument("--elevation", type=float, default=10.0)
    p.add_argument("--distance", type=float, default=CAMERA_DISTANCE)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="output PNG")
    p.add_argument("--alpha-out", type=Path, help="also write the alpha map")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a protocol")
    _add_common(p)
    _add_threads(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset directory (default: from the checkpoint config)")
    p.add_argument("--config", type=Path, help="YAML config whose data and eval sections replace the embedded ones")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--csv", type=Path, required=True, help="metric CSV")
    p.add_argument("--out-dir", type=Path, help="directory for the JSON and text reports")
    p.add_argument("--save-images", action="store_true", default=None)
    p.add_argument("--frame-stride", type=int, default=1)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the end-to-end check")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare field variants")
    _add_common(p)
    _add_threads(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out-dir", type=Path, default=Path("ablation"))
    p.add_argument("--steps", type=int)
    p.add_argument("--variants", help="comma-separated subset of " + ", ".join(VARIANTS))
    p.add_argument("--protocol", choices=PROTOCOLS, default="pose")
    p.add_argument("--frame-stride", type=int, default=1)
    p.add_argument("--sweep-views", action="store_true", help="evaluate --checkpoint with 1..C input views")
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(handler=cmd_ablate)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Dict]:
    train_keys = ("steps", "seed", "learning_rate", "rays_per_step", "samples_per_ray", "precision")
    field_keys = ("memory_offset", "enable_skeletal", "enable_pixel_aligned", "enable_temporal_transformer",
                  "enable_multiview_transformer")
    return {
        "train": {k: getattr(args, k, None) for k in train_keys},
        "field": {k: getattr(args, k, None) for k in field_keys},
        "data": {"data_dir": str(args.data) if getattr(args, "data", None) else None},
    }


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(getattr(args, "config", None), _overrides(args))
    variant = getattr(args, "variant", None)
    if variant:
        config = replace(config, field=config.field.with_variant(variant))
    return config


def cmd_gen_data(args: argparse.Namespace) -> int:
    logger.info("[1/2] Rendering %d subjects x %d frames x %d views...", args.subjects, args.frames, args.views)
    captures = generate_captures(args.seed, args.subjects, args.frames, args.views, args.resolution)
    logger.info("[2/2] Writing dataset...")
    write_dataset(captures, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    captures = read_dataset(config.data.data_dir)
    split = Split.from_config(config.data, captures)
    trainer = Trainer(captures, config, args.out, subjects=split.train_subjects, frames=split.train_frames)
    try:
        trainer.train()
    except NonFiniteLossError as exc:
        logger.error("offending ray: %s", exc.diagnostic)
        raise
    trainer.save_results()
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    model, config = checkpoint_load(args.checkpoint)
    manifest = read_manifest(args.data)
    subject = args.subject or manifest["subjects"][0]["name"]
    captures = read_dataset(args.data, subjects=[subject])
    capture = captures.subject(subject)
    capture.check_frame(args.frame)
    if args.azimuth is not None:
        rig = captures.cameras[0]
        cam = orbit_camera(args.azimuth, args.elevation, args.distance, CAMERA_TARGET,
                           float(rig.K[0, 0]), rig.width, rig.height)
        view = None
    else:
        view = args.camera if args.camera is not None else (captures.query_views or captures.input_views)[0]
        if not 0 <= view < captures.view_count:
            raise SkeletalRadianceError(f"camera index {view} outside [0, {captures.view_count})")
        cam = captures.cameras[view]
    threads = resolve_threads(args.threads, config.eval.threads)
    samples = args.samples or config.eval.samples_per_ray
    image, alpha = render_image(model, captures, subject, args.frame, cam, samples, threads, config.eval.tile_size)
    write_image(args.out, image)
    logger.info("Wrote %s", args.out)
    if args.alpha_out:
        write_alpha(args.alpha_out, alpha)
        logger.info("Wrote %s", args.alpha_out)
    if view is not None:
        gt = capture.images[view, args.frame]
        logger.info("PSNR %.2f dB, SSIM %.4f against the captured view", psnr(image, gt), ssim(image, gt))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, config = checkpoint_load(args.checkpoint)
    if args.config is not None:
        loaded = load_config(args.config)
        config = replace(config, data=loaded.data, eval=loaded.eval)
    data_dir = args.data or Path(config.data.data_dir)
    captures = read_dataset(data_dir)
    split = Split.from_config(config.data, captures)
    protocol = args.protocol or config.eval.protocol
    threads = resolve_threads(args.threads, config.eval.threads)
    save_images = config.eval.save_images if args.save_images is None else args.save_images
    evaluator = Evaluator(model, captures, split, protocol, samples=config.eval.samples_per_ray, threads=threads,
                          tile_size=config.eval.tile_size, frame_stride=args.frame_stride)
    evaluator.evaluate(keep_images=save_images)
    out_dir = args.out_dir or args.csv.parent
    evaluator.save_results(out_dir, csv_path=args.csv)
    if save_images:
        evaluator.save_images(out_dir / "images" / protocol)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradient_suite(args.seed, end_to_end=not args.quick)
    failed = [r for r in reports if not r.passed]
    for report in failed:
        logger.error("FAILED %s", report)
    return 1 if failed else 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    captures = read_dataset(config.data.data_dir)
    split = Split.from_config(config.data, captures)
    threads = resolve_threads(args.threads, config.eval.threads)
    if args.sweep_views:
        model, _ = checkpoint_load(args.checkpoint)
        sweep_views(model, captures, split, args.protocol, args.out_dir, config.eval.samples_per_ray, threads,
                    args.frame_stride)
        return 0
    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    runner = AblationRunner(captures, config, args.out_dir, variants, args.protocol, split, args.steps, threads,
                            args.frame_stride)
    runner.run()
    runner.save_results()
    return 0


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command == "ablate" and args.sweep_views and args.checkpoint is None:
        parser.print_usage(sys.stderr)
        print("skeletal-radiance ablate: error: --sweep-views needs --checkpoint", file=sys.stderr)
        return 2
    if args.command == "ablate" and args.variants:
        unknown = [v for v in args.variants.split(",") if v.strip() not in VARIANTS]
        if unknown:
            parser.print_usage(sys.stderr)
            print(f"skeletal-radiance ablate: error: unknown variants {', '.join(unknown)}", file=sys.stderr)
            return 2
    setup_logging(args.verbose - args.quiet)
    try:
        return args.handler(args)
    except (SkeletalRadianceError, OSError) as exc:
        logger.error("%s", exc)
        return 1
    except Exception:
        logger.exception("%s failed", args.command)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
