"""
Evaluation protocols and metric reports

    pose      training subjects at held-out frames
    identity  held-out subjects at held-out frames
    seen      training subjects at training frames
"""

import csv
import json
import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import __version__
from .config import PROTOCOLS, DataConfig, parse_frame_range
from .dataset import CaptureSet
from .errors import ProtocolError
from .log import progress_disabled
from .metrics import baseline_scores, score
from .render import DEFAULT_SAMPLES, render_image, write_alpha, write_image
from .tensor import make_rng

logger = logging.getLogger(__name__)

CSV_FIELDS = ("subject", "frame", "view", "psnr", "ssim")
TRAIN_SUBJECTS = 6
TEST_SUBJECTS = 2
TRAIN_FRAMES = range(0, 20)
TEST_FRAMES = range(20, 30)

RenderFn = Callable[[str, int, int], Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class Split:
    train_subjects: Tuple[str, ...]
    test_subjects: Tuple[str, ...]
    train_frames: Tuple[int, ...]
    test_frames: Tuple[int, ...]

    @classmethod
    def default(cls, subject_names: Sequence[str], frame_count: int = 30) -> "Split":
        """6 training and 2 test subjects, frames 0-19 and 20-29, shrunk to smaller captures"""
        names = list(subject_names)
        if len(names) >= TRAIN_SUBJECTS + TEST_SUBJECTS:
            train, test = names[:TRAIN_SUBJECTS], names[TRAIN_SUBJECTS:TRAIN_SUBJECTS + TEST_SUBJECTS]
        else:
            n_test = max(1, len(names) // 4) if len(names) > 1 else 0
            train, test = names[:len(names) - n_test], names[len(names) - n_test:]
        if frame_count >= TEST_FRAMES.stop:
            train_frames, test_frames = tuple(TRAIN_FRAMES), tuple(TEST_FRAMES)
        else:
            cut = max(1, (2 * frame_count) // 3)
            train_frames, test_frames = tuple(range(cut)), tuple(range(cut, frame_count))
        return cls(tuple(train), tuple(test), train_frames, test_frames)

    @classmethod
    def random(cls, subject_names: Sequence[str], n_test: int, seed: int, frame_count: int = 30) -> "Split":
        """A random identity split; the frame ranges are the default ones"""
        names = list(subject_names)
        if not 0 < n_test < len(names):
            raise ProtocolError(f"cannot hold out {n_test} of {len(names)} subjects")
        order = make_rng(seed, 0x5E).permutation(len(names))
        test = sorted(names[i] for i in order[:n_test])
        train = [n for n in names if n not in test]
        base = cls.default(names, frame_count)
        return cls(tuple(train), tuple(test), base.train_frames, base.test_frames)

    @classmethod
    def from_config(cls, data: DataConfig, captures: CaptureSet) -> "Split":
        base = cls.default(captures.subject_names, captures.frame_count)
        train = tuple(data.train_subjects) or base.train_subjects
        test = tuple(data.test_subjects) or tuple(n for n in captures.subject_names if n not in train)
        frames = captures.frame_count
        train_frames = tuple(t for t in parse_frame_range(data.train_frames) if t < frames)
        test_frames = tuple(t for t in parse_frame_range(data.test_frames) if t < frames)
        return cls(train, test, train_frames or base.train_frames, test_frames or base.test_frames)

    def check(self, protocol: str) -> None:
        if protocol not in PROTOCOLS:
            raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
        if protocol == "pose":
            overlap = set(self.train_frames) & set(self.test_frames)
            if overlap:
                raise ProtocolError(f"pose protocol needs disjoint frame ranges; shared frames {sorted(overlap)}")
        if protocol == "identity":
            overlap = set(self.train_subjects) & set(self.test_subjects)
            if overlap:
                raise ProtocolError(f"identity protocol needs disjoint subjects; shared {', '.join(sorted(overlap))}")
        subjects, frames = self.targets(protocol)
        if not subjects or not frames:
            raise ProtocolError(f"{protocol} protocol selects no subject or no frame")

    def targets(self, protocol: str) -> Tuple[Tuple[str, ...], Tuple[int, ...]]:
        if protocol == "pose":
            return self.train_subjects, self.test_frames
        if protocol == "identity":
            return self.test_subjects, self.test_frames
        return self.train_subjects, self.train_frames

    def to_dict(self) -> Dict:
        return {
            "train_subjects": list(self.train_subjects),
            "test_subjects": list(self.test_subjects),
            "train_frames": [self.train_frames[0], self.train_frames[-1]] if self.train_frames else [],
            "test_frames": [self.test_frames[0], self.test_frames[-1]] if self.test_frames else [],
        }


class Evaluator:
    """Renders every (subject, frame, held-out view) of a protocol and scores it"""

    def __init__(self, model, captures: CaptureSet, split: Split, protocol: str = "pose",
                 samples: int = DEFAULT_SAMPLES, threads: int = 1, tile_size: int = 256,
                 views: Optional[Sequence[int]] = None, input_views: Optional[Sequence[int]] = None,
                 frame_stride: int = 1, render_fn: Optional[RenderFn] = None):
        self.model = model
        self.captures = captures
        self.split = split
        self.protocol = protocol
        self.samples = samples
        self.threads = threads
        self.tile_size = tile_size
        self.views = list(views if views is not None else (captures.query_views or captures.input_views))
        self.input_views = tuple(input_views) if input_views is not None else None
        self.frame_stride = max(1, frame_stride)
        self.render_fn = render_fn
        self.images: Dict[Tuple[str, int, int], Tuple[np.ndarray, np.ndarray]] = {}
        self.results = {
            "timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "version": __version__,
            "variant": getattr(getattr(model, "config", None), "variant", None),
            "protocol": protocol,
            "split": split.to_dict(),
            "views": self.views,
            "rows": [],
            "summary": {},
            "baselines": {},
        }

    def jobs(self) -> List[Tuple[str, int, int]]:
        subjects, frames = self.split.targets(self.protocol)
        frames = frames[::self.frame_stride]
        return [(s, t, v) for s in subjects for t in frames for v in self.views]

    def render(self, subject: str, t: int, view: int, state=None) -> Tuple[np.ndarray, np.ndarray]:
        if self.render_fn is not None:
            return self.render_fn(subject, t, view)
        if state is None:
            state = self.model.prepare_frame(self.captures, subject, t, views=self.input_views)
        return render_image(self.model, self.captures, subject, t, self.captures.cameras[view], self.samples,
                            self.threads, self.tile_size, state=state)

    def evaluate(self, keep_images: bool = False) -> Dict[str, float]:
        logger.info("[1/3] Checking %s protocol split...", self.protocol)
        self.split.check(self.protocol)
        for subject in set(self.split.targets(self.protocol)[0]):
            self.captures.subject(subject)
        jobs = self.jobs()
        logger.info("[2/3] Rendering %d view(s)...", len(jobs))
        rows = self.results["rows"]
        baselines: Dict[str, List[float]] = {}
        state_key, state = None, None
        for subject, t, view in tqdm(jobs, desc=f"Evaluating {self.protocol}", disable=progress_disabled(logger)):
            if self.render_fn is None and state_key != (subject, t):
                state_key = (subject, t)
                state = self.model.prepare_frame(self.captures, subject, t, views=self.input_views)
            image, alpha = self.render(subject, t, view, state)
            if not np.all(np.isfinite(image)):
                logger.warning("non-finite pixels in %s frame %d view %d", subject, t, view)
            capture = self.captures.subject(subject)
            gt, mask = capture.images[view, t], capture.masks[view, t]
            rows.append({"subject": subject, "frame": t, "view": view, **score(image, gt, mask)})
            for key, value in baseline_scores(gt, mask).items():
                baselines.setdefault(key, []).append(value)
            if keep_images:
                self.images[subject, t, view] = (image, alpha)
        logger.info("[3/3] Summarising...")
        summary = {"count": len(rows)}
        for key in ("psnr", "ssim", "body_psnr"):
            summary[key] = float(np.mean([r[key] for r in rows])) if rows else float("nan")
        self.results["summary"] = summary
        self.results["baselines"] = {k: float(np.mean(v)) for k, v in baselines.items()}
        logger.info("  %s: PSNR %.2f dB  SSIM %.4f  body PSNR %.2f dB  (gray %.2f dB, mean color %.2f dB)",
                    self.protocol, summary["psnr"], summary["ssim"], summary["body_psnr"],
                    self.results["baselines"].get("gray_psnr", float("nan")),
                    self.results["baselines"].get("mean_color_psnr", float("nan")))
        return summary

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_FIELDS)
            for row in self.results["rows"]:
                writer.writerow([row["subject"], row["frame"], row["view"],
                                 f"{row['psnr']:.4f}", f"{row['ssim']:.6f}"])
        return path

    def save_images(self, out_dir) -> List[Path]:
        out_dir = Path(out_dir)
        written = []
        for (subject, t, view), (image, alpha) in sorted(self.images.items()):
            stem = f"{subject}_{t:03d}_{view}"
            written.append(write_image(out_dir / f"{stem}.png", image))
            written.append(write_alpha(out_dir / f"{stem}_alpha.png", alpha))
        return written

    def save_results(self, out_dir, csv_path=None) -> Path:
        """Metric CSV, timestamped JSON report and a plain-text summary"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.write_csv(csv_path or out_dir / f"eval_{self.protocol}.csv")
        report = out_dir / f"eval_{self.protocol}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
        report.write_text(json.dumps(self.results, indent=2), encoding="utf-8")
        summary_file = out_dir / f"eval_{self.protocol}_summary.txt"
        summary = self.results["summary"]
        with open(summary_file, "w", encoding="utf-8") as f:
            f.write("Skeletal Radiance Evaluation Summary\n")
            f.write("=" * 50 + "\n\n")
            f.write(f"Protocol: {self.protocol}\n")
            f.write(f"Variant: {self.results['variant']}\n")
            f.write(f"Date: {self.results['timestamp']}\n")
            f.write(f"Views rendered: {summary.get('count', 0)}\n\n")
            f.write(f"PSNR: {summary.get('psnr', float('nan')):.3f} dB\n")
            f.write(f"SSIM: {summary.get('ssim', float('nan')):.4f}\n")
            f.write(f"Body PSNR: {summary.get('body_psnr', float('nan')):.3f} dB\n")
            f.write("\nBaselines:\n")
            for key, value in sorted(self.results["baselines"].items()):
                f.write(f"  {key}: {value:.4f}\n")
        logger.info("Results saved to %s, %s and %s", csv_path, report, summary_file)
        return report


def evaluate(model, captures: CaptureSet, split: Split, protocol: str = "pose", **options) -> Dict[str, float]:
    """Mean PSNR / SSIM / body PSNR of a protocol"""
    return Evaluator(model, captures, split, protocol, **options).evaluate()
