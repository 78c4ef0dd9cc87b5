"""
Ablation harness: trains every field variant on identical data and seeds and compares
them on one protocol; also sweeps the number of input views of a trained field
"""

import csv
import json
import logging
from dataclasses import replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import VARIANTS, RunConfig
from .dataset import CaptureSet
from .evaluate import Evaluator, Split
from .field import SkeletalRadianceField
from .tensor import default_dtype
from .train import Trainer

logger = logging.getLogger(__name__)

COMPARISON_FIELDS = ("variant", "steps", "final_loss", "psnr", "ssim", "body_psnr", "gray_psnr",
                     "mean_color_psnr")
SWEEP_FIELDS = ("views", "psnr", "ssim", "body_psnr")
FULL_MARGIN_DB = 0.3


def variant_slug(variant: str) -> str:
    return variant.lower().replace("+", "_")


def ordering_checks(rows: Sequence[Dict]) -> Dict[str, bool]:
    """Expected PSNR ordering between variants; only pairs present in rows are checked"""
    psnr = {r["variant"]: r["psnr"] for r in rows}
    pairs = [("Sk+Px+T+MV", "Sk+Px+MV", 0.0), ("Sk+Px+MV", "Sk+Px", 0.0), ("Sk+Px+T", "Sk+Px", 0.0),
             ("Sk+Px+T+MV", "Sk+Px", FULL_MARGIN_DB)]
    checks = {}
    for better, worse, margin in pairs:
        if better in psnr and worse in psnr:
            label = f"{better} >= {worse}" + (f" + {margin} dB" if margin else "")
            checks[label] = bool(psnr[better] >= psnr[worse] + margin)
    return checks


class AblationRunner:
    """Trains and evaluates each variant in turn, then writes the comparison table"""

    def __init__(self, captures: CaptureSet, config: RunConfig, out_dir, variants: Sequence[str] = VARIANTS,
                 protocol: str = "pose", split: Optional[Split] = None, steps: Optional[int] = None,
                 threads: int = 1, frame_stride: int = 1):
        self.captures = captures
        self.config = config
        self.out_dir = Path(out_dir)
        self.variants = list(variants)
        self.protocol = protocol
        self.split = split or Split.from_config(config.data, captures)
        self.steps = steps or config.train.steps
        self.threads = threads
        self.frame_stride = frame_stride
        self.version = __version__
        self.build_time = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        self.rows: List[Dict] = []

    def variant_config(self, variant: str) -> RunConfig:
        return replace(self.config, field=self.config.field.with_variant(variant))

    def run_variant(self, variant: str) -> Dict:
        config = self.variant_config(variant)
        checkpoint = self.out_dir / f"{variant_slug(variant)}.nhpt"
        trainer = Trainer(self.captures, config, checkpoint, subjects=self.split.train_subjects,
                          frames=self.split.train_frames)
        losses = trainer.train(self.steps)
        evaluator = Evaluator(trainer.model, self.captures, self.split, self.protocol,
                              samples=config.eval.samples_per_ray, threads=self.threads,
                              tile_size=config.eval.tile_size, frame_stride=self.frame_stride)
        summary = evaluator.evaluate()
        evaluator.save_results(self.out_dir / variant_slug(variant))
        baselines = evaluator.results["baselines"]
        return {
            "variant": variant,
            "steps": len(losses),
            "final_loss": losses[-1] if losses else float("nan"),
            "psnr": summary["psnr"],
            "ssim": summary["ssim"],
            "body_psnr": summary["body_psnr"],
            "gray_psnr": baselines.get("gray_psnr", float("nan")),
            "mean_color_psnr": baselines.get("mean_color_psnr", float("nan")),
        }

    def run(self) -> List[Dict]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        total = len(self.variants)
        for i, variant in enumerate(self.variants, 1):
            logger.info("[%d/%d] Variant %s...", i, total, variant)
            self.rows.append(self.run_variant(variant))
        for label, ok in ordering_checks(self.rows).items():
            (logger.info if ok else logger.warning)("  ordering %s: %s", label, "holds" if ok else "violated")
        return self.rows

    def save_results(self) -> Path:
        """comparison.csv plus a JSON record of the run"""
        path = self.out_dir / "comparison.csv"
        _write_rows(path, COMPARISON_FIELDS, self.rows)
        record = {
            "timestamp": self.build_time,
            "version": self.version,
            "protocol": self.protocol,
            "steps": self.steps,
            "seed": self.config.train.seed,
            "split": self.split.to_dict(),
            "rows": self.rows,
            "ordering": ordering_checks(self.rows),
        }
        (self.out_dir / f"ablation_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json").write_text(
            json.dumps(record, indent=2), encoding="utf-8")
        logger.info("Comparison saved to %s", path)
        return path


def _write_rows(path: Path, fields: Sequence[str], rows: Sequence[Dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def without_memory(model: SkeletalRadianceField) -> SkeletalRadianceField:
    """Same weights, one timestep: the temporal pathway sees only the current frame"""
    with default_dtype(model.dtype):
        single = SkeletalRadianceField(replace(model.config, memory_offset=0), seed=model.seed)
    single.load_state_dict(model.state_dict())
    return single


def sweep_views(model: SkeletalRadianceField, captures: CaptureSet, split: Split, protocol: str = "pose",
                out_dir=None, samples: int = 64, threads: int = 1, frame_stride: int = 1) -> List[Dict]:
    """Evaluate with the first 1..C input views and no memory frames"""
    single = without_memory(model)
    rows = []
    inputs = list(captures.input_views)
    for k in range(1, len(inputs) + 1):
        logger.info("[%d/%d] Evaluating with %d input view(s)...", k, len(inputs), k)
        evaluator = Evaluator(single, captures, split, protocol, samples=samples, threads=threads,
                              input_views=inputs[:k], frame_stride=frame_stride)
        summary = evaluator.evaluate()
        rows.append({"views": k, "psnr": summary["psnr"], "ssim": summary["ssim"],
                     "body_psnr": summary["body_psnr"]})
    if out_dir is not None:
        _write_rows(Path(out_dir) / "view_sweep.csv", SWEEP_FIELDS, rows)
    best = max(rows, key=lambda r: r["psnr"]) if rows else None
    if best is not None and not np.isnan(best["psnr"]):
        logger.info("Best view count: %d (%.2f dB)", best["views"], best["psnr"])
    return rows
