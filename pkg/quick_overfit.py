#!/usr/bin/env python3
"""
Quick Overfit - trains one synthetic subject and checks the rendered views
against the constant mean-color baseline
No dataset on disk, just a checkpoint and the evaluation reports

--calibrate trains until both margins hold and records the step budget, the
runtime and the margins in calibration/overfit.yaml; later runs use that budget
"""

import argparse
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

import yaml

from skeletal_radiance.config import DataConfig, RunConfig, TrainConfig
from skeletal_radiance.dataset import CaptureSet, generate_captures
from skeletal_radiance.evaluate import Evaluator, Split
from skeletal_radiance.log import setup_logging
from skeletal_radiance.train import Trainer

CALIBRATION_FILE = Path(__file__).resolve().parent / "calibration" / "overfit.yaml"
FALLBACK_STEPS = 1500
FRAMES = 10
TRAINING_VIEW_MARGIN_DB = 8.0
HELD_OUT_VIEW_MARGIN_DB = 4.0


def pinned_steps(path: Path = CALIBRATION_FILE) -> int:
    """Step budget recorded by the last calibration run, FALLBACK_STEPS before the first one"""
    if not path.exists():
        return FALLBACK_STEPS
    record = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return int(record.get("steps", FALLBACK_STEPS))


def build_trainer(out_dir: Path, steps: int, seed: int):
    captures = generate_captures(seed=seed, subjects=1, frames=FRAMES, views=4, resolution=64)
    subject = captures.subject_names[0]
    config = RunConfig(train=TrainConfig(steps=steps, seed=seed), data=DataConfig(train_frames=f"0-{FRAMES - 1}"))
    trainer = Trainer(captures, config, out_dir / "overfit.nhpt", subjects=[subject], frames=range(FRAMES))
    return captures, subject, trainer


def measure(trainer: Trainer, captures: CaptureSet, subject: str, out_dir: Optional[Path] = None) -> Dict[str, Dict]:
    """PSNR, mean-color baseline and gain for one training view and one held-out view"""
    split = Split((subject,), (), tuple(range(FRAMES)), ())
    checks = [("training view", captures.input_views[0], TRAINING_VIEW_MARGIN_DB),
              ("held-out view", captures.query_views[0], HELD_OUT_VIEW_MARGIN_DB)]
    measured = {}
    for label, view, margin in checks:
        evaluator = Evaluator(trainer.model, captures, split, "seen", views=[view])
        summary = evaluator.evaluate()
        if out_dir is not None:
            evaluator.save_results(out_dir / label.replace(" ", "_"))
        baseline = evaluator.results["baselines"]["mean_color_psnr"]
        measured[label] = {"view": int(view), "psnr": round(float(summary["psnr"]), 3),
                           "baseline": round(float(baseline), 3), "gain": round(float(summary["psnr"] - baseline), 3),
                           "required": margin}
    return measured


def report(measured: Dict[str, Dict]) -> bool:
    passed = True
    for label, m in measured.items():
        ok = m["gain"] >= m["required"]
        passed &= ok
        print(f"  {label} {m['view']}: {m['psnr']:.2f} dB, baseline {m['baseline']:.2f} dB, "
              f"gain {m['gain']:+.2f} dB (need {m['required']:+.1f}) {'ok' if ok else 'FAILED'}")
    return passed


def quick_overfit(out_dir: Path, steps: int, seed: int) -> bool:
    print("Skeletal Radiance - Quick Overfit")
    print("=" * 40)
    print(f"\nRendering 1 subject x {FRAMES} frames x 4 views at 64x64...")
    captures, subject, trainer = build_trainer(out_dir, steps, seed)
    losses = trainer.train()
    trainer.save_results(out_dir)

    passed = report(measure(trainer, captures, subject, out_dir))
    print(f"\nLoss: {losses[0]:.5f} -> {losses[-1]:.5f}")
    print(f"Checkpoint: {out_dir / 'overfit.nhpt'}")
    print("\nOverfit check passed" if passed else "\nOverfit check FAILED")
    return passed


def calibrate(out_dir: Path, max_steps: int, check_every: int, seed: int, path: Path = CALIBRATION_FILE) -> bool:
    print("Skeletal Radiance - Overfit Calibration")
    print("=" * 40)
    print(f"\nTraining up to {max_steps} steps, checking every {check_every}...")
    captures, subject, trainer = build_trainer(out_dir, max_steps, seed)
    started = time.perf_counter()
    training_seconds = 0.0
    measured = {}
    passed = False
    while len(trainer.losses) < max_steps:
        chunk_start = time.perf_counter()
        trainer.train(min(check_every, max_steps - len(trainer.losses)))
        training_seconds += time.perf_counter() - chunk_start
        measured = measure(trainer, captures, subject)
        print(f"\nStep {len(trainer.losses)}:")
        passed = report(measured)
        if passed:
            break

    record = {
        "steps": len(trainer.losses),
        "passed": passed,
        "seed": seed,
        "training_seconds": round(training_seconds, 1),
        "total_seconds": round(time.perf_counter() - started, 1),
        "final_loss": round(float(trainer.losses[-1]), 6),
        "margins": measured,
        "date": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(record, fh, sort_keys=False)
    print(f"\nCalibration saved to {path}")
    print("\nBudget pinned at %d steps" % record["steps"] if passed else "\nNo budget up to the step limit")
    return passed


def main():
    parser = argparse.ArgumentParser(description="single-subject overfit check")
    parser.add_argument("--out-dir", type=Path, default=Path("runs/overfit"))
    parser.add_argument("--steps", type=int, default=None,
                        help="step budget (default: the calibrated budget, else %d)" % FALLBACK_STEPS)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--calibrate", action="store_true", help="find and record the step budget")
    parser.add_argument("--max-steps", type=int, default=6000)
    parser.add_argument("--check-every", type=int, default=250)
    args = parser.parse_args()
    setup_logging(0)
    if args.calibrate:
        ok = calibrate(args.out_dir, args.max_steps, args.check_every, args.seed)
    else:
        ok = quick_overfit(args.out_dir, args.steps or pinned_steps(), args.seed)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
