"""
Photometric training: ray batching, the optimisation step, the training loop and checkpoints
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation
from tqdm import tqdm

from . import __version__
from .config import RunConfig, parse_frame_range
from .dataset import CaptureSet
from .errors import CheckpointError, ConfigError, DatasetError, NonFiniteLossError
from .field import SkeletalRadianceField
from .geometry import generate_rays, ray_box_bounds_batch
from .log import progress_disabled
from .nn import Adam
from .render import render_rays
from .tensor import Tensor, backward, default_dtype, make_rng, mul, sub
from .tensor_io import load_tensors, save_tensors

logger = logging.getLogger(__name__)

TRAIN_STREAM = 0x7A
CHECKPOINT_FORMAT = "skeletal-radiance-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class RayBatch:
    """Rays of one query view at frame t, with the input views the field may use"""

    subject: str
    t: int
    query_view: int
    input_views: Tuple[int, ...]
    pixels: np.ndarray
    origin: np.ndarray
    directions: np.ndarray
    target: np.ndarray
    foreground: np.ndarray
    empty_mask: bool = False

    @property
    def size(self) -> int:
        return self.directions.shape[0]


def choose_views(captures: CaptureSet, rng: np.random.Generator) -> Tuple[int, Tuple[int, ...]]:
    """A query view and the input views it is rendered from; the query is never an input"""
    inputs = list(captures.input_views)
    if len(inputs) >= 2:
        query = int(rng.choice(inputs))
        return query, tuple(c for c in inputs if c != query)
    if not captures.query_views:
        raise DatasetError("training needs two input views or a held-out query view")
    return int(rng.choice(captures.query_views)), tuple(inputs)


def sample_training_rays(captures: CaptureSet, subject, t: int, query_view: int, n: int,
                         rng: np.random.Generator, input_views: Optional[Sequence[int]] = None,
                         foreground_fraction: float = 0.8, dilation: int = 2) -> RayBatch:
    """
    n pixels of one view drawn with replacement: a foreground_fraction share from the
    dilated mask, the rest from the background
    """
    capture = captures.subject(subject)
    capture.check_frame(t)
    if input_views is None:
        input_views = tuple(c for c in captures.input_views if c != query_view)
    if query_view in input_views:
        raise DatasetError(f"query view {query_view} is also an input view")
    if n < 1:
        raise ConfigError(f"need at least one ray per batch, got {n}")
    cam = captures.cameras[query_view]
    mask = capture.masks[query_view, t]
    if dilation > 0:
        mask = binary_dilation(mask, iterations=dilation)
    flat = mask.reshape(-1)
    fg = np.flatnonzero(flat)
    bg = np.flatnonzero(~flat)
    empty = fg.size == 0
    if empty:
        logger.warning("empty mask for %s view %d frame %d; sampling background only", capture.name, query_view, t)
        n_fg = 0
    elif bg.size == 0:
        n_fg = n
    else:
        n_fg = int(round(n * foreground_fraction))
    index = np.concatenate([rng.choice(fg, n_fg, replace=True) if n_fg else np.zeros(0, dtype=np.int64),
                            rng.choice(bg, n - n_fg, replace=True) if n - n_fg else np.zeros(0, dtype=np.int64)])
    pixels = np.stack([index % cam.width, index // cam.width], axis=1).astype(np.float64)
    origin, directions = generate_rays(cam, pixels)
    target = capture.images[query_view, t].reshape(-1, 3)[index]
    return RayBatch(capture.name, t, query_view, tuple(input_views), pixels, origin, directions,
                    target, flat[index], empty)


def _diagnostic(batch: RayBatch, rows: np.ndarray, near: np.ndarray, far: np.ndarray,
                prediction: np.ndarray) -> Dict:
    bad = np.flatnonzero(~np.all(np.isfinite(prediction), axis=1))
    i = int(bad[0]) if bad.size else 0
    ray = int(rows[i]) if rows.size else 0
    return {
        "subject": batch.subject,
        "frame": batch.t,
        "query_view": batch.query_view,
        "ray": ray,
        "pixel": batch.pixels[ray].tolist(),
        "origin": np.asarray(batch.origin).tolist(),
        "direction": batch.directions[ray].tolist(),
        "near": float(near[i]) if rows.size else None,
        "far": float(far[i]) if rows.size else None,
        "prediction": prediction[i].tolist() if rows.size else None,
        "target": batch.target[ray].tolist(),
    }


def batch_loss(model, captures: CaptureSet, batch: RayBatch, samples: int = 64,
               rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Dict]:
    """Mean squared error over the batch; rays missing the body box predict black"""
    state = model.prepare_frame(captures, batch.subject, batch.t, views=batch.input_views, clamp_memory=True)
    near, far, hit = ray_box_bounds_batch(batch.origin, batch.directions, state.bbox)
    # a grazing hit crosses no volume and predicts black like a miss
    crossing = hit & (far > near)
    rows = np.flatnonzero(crossing)
    miss_term = float(np.sum(batch.target[~crossing] ** 2))
    scale = 1.0 / (3 * batch.size)
    if rows.size == 0:
        return Tensor(np.asarray(miss_term * scale)), {"hit": 0, "prediction": np.zeros((0, 3))}
    result = render_rays(model, state, batch.origin, batch.directions[rows], near[rows], far[rows], samples, rng)
    residual = sub(result.rgb, Tensor(batch.target[rows], dtype=result.rgb.dtype))
    loss = (mul(residual, residual).sum() + miss_term) * scale
    info = {"hit": int(rows.size), "rows": rows, "near": near[rows], "far": far[rows],
            "prediction": result.rgb.data}
    return loss, info


def train_step(model, captures: CaptureSet, batch: RayBatch, optimizer: Optional[Adam] = None,
               samples: int = 64, rng: Optional[np.random.Generator] = None) -> float:
    """One photometric step: loss, backward, Adam update. Returns the loss value"""
    if batch.size == 0:
        raise DatasetError("empty ray batch")
    if optimizer is not None:
        optimizer.zero_grad()
    loss, info = batch_loss(model, captures, batch, samples, rng)
    value = loss.item()
    if not np.isfinite(value):
        diagnostic = _diagnostic(batch, info.get("rows", np.zeros(0, dtype=np.int64)), info.get("near"),
                                 info.get("far"), info["prediction"])
        raise NonFiniteLossError(f"non-finite loss {value} at {batch.subject} frame {batch.t}", diagnostic)
    if not loss.requires_grad:
        logger.debug("no ray of %s frame %d hit the body box; nothing to update", batch.subject, batch.t)
        return value
    backward(loss)
    if optimizer is not None:
        optimizer.step()
    return value


def checkpoint_metadata(model: SkeletalRadianceField, config: Optional[RunConfig] = None,
                        step: Optional[int] = None) -> Dict:
    config = config or RunConfig(field=model.config)
    if config.field != model.config:
        raise ConfigError("checkpoint config does not describe the model's field")
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "variant": model.config.variant,
        "config": config.to_dict(),
    }
    if step is not None:
        meta["step"] = step
    return meta


def checkpoint_save(model: SkeletalRadianceField, path, config: Optional[RunConfig] = None,
                    step: Optional[int] = None) -> Path:
    """All named parameters plus the embedded run configuration"""
    path = save_tensors(path, model.state_dict(), checkpoint_metadata(model, config, step))
    logger.info("Saved checkpoint %s (%s, %d tensors)", path, model.config.variant, len(model.state_dict()))
    return path


def read_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict, RunConfig]:
    tensors, meta = load_tensors(path)
    if not meta or meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    try:
        config = RunConfig.from_dict(meta.get("config", {}))
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid embedded config ({exc})") from exc
    return tensors, meta, config


def checkpoint_load(path, model: Optional[SkeletalRadianceField] = None) -> Tuple[SkeletalRadianceField, RunConfig]:
    """Rebuild the model from the embedded config, or load the weights into `model`"""
    tensors, meta, config = read_checkpoint(path)
    if model is None:
        dtypes = {np.asarray(v).dtype for v in tensors.values()}
        dtype = dtypes.pop() if len(dtypes) == 1 else np.dtype(config.train.precision)
        with default_dtype(dtype):
            model = SkeletalRadianceField(config.field, seed=int(meta.get("seed", 0)))
    model.load_state_dict(tensors)
    logger.info("Loaded checkpoint %s (%s)", path, model.config.variant)
    return model, config


def resolve_frames(text: str, frame_count: int) -> List[int]:
    frames = [t for t in parse_frame_range(text) if t < frame_count]
    if not frames:
        raise ConfigError(f"frame range {text!r} selects no frame of a {frame_count}-frame capture")
    return frames


class Trainer:
    """Trains one field on a capture set and writes the checkpoint plus a training log"""

    def __init__(self, captures: CaptureSet, config: RunConfig, out_path, subjects: Optional[Sequence[str]] = None,
                 frames: Optional[Sequence[int]] = None):
        self.captures = captures
        self.config = config
        self.out_path = Path(out_path)
        self.version = __version__
        self.start_time = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        self.subjects = list(subjects or config.data.train_subjects or captures.subject_names)
        self.frames = list(frames if frames is not None else
                           resolve_frames(config.data.train_frames, captures.frame_count))
        self.dtype = np.dtype(config.train.precision)
        with default_dtype(self.dtype):
            self.model = SkeletalRadianceField(config.field, seed=config.train.seed)
        self.optimizer = Adam(self.model.parameters(), lr=config.train.learning_rate)
        self.rng = make_rng(config.train.seed, TRAIN_STREAM)
        self.losses: List[float] = []
        self.results = {
            "timestamp": self.start_time,
            "version": self.version,
            "variant": config.field.variant,
            "subjects": self.subjects,
            "frames": [self.frames[0], self.frames[-1]],
            "config": config.to_dict(),
            "losses": self.losses,
        }

    def next_batch(self) -> RayBatch:
        subject = self.subjects[int(self.rng.integers(len(self.subjects)))]
        t = self.frames[int(self.rng.integers(len(self.frames)))]
        query, inputs = choose_views(self.captures, self.rng)
        train = self.config.train
        return sample_training_rays(self.captures, subject, t, query, train.rays_per_step, self.rng,
                                    input_views=inputs, foreground_fraction=train.foreground_fraction,
                                    dilation=train.mask_dilation)

    def step(self) -> float:
        train = self.config.train
        batch = self.next_batch()
        with default_dtype(self.dtype):
            loss = train_step(self.model, self.captures, batch, self.optimizer, train.samples_per_ray,
                              self.rng if train.stratified else None)
        self.losses.append(loss)
        return loss

    def train(self, steps: Optional[int] = None) -> List[float]:
        train = self.config.train
        steps = steps or train.steps
        logger.info("[1/2] Training %s for %d steps on %d subject(s), frames %d-%d...",
                    self.config.field.variant, steps, len(self.subjects), self.frames[0], self.frames[-1])
        bar = tqdm(range(steps), desc="Training", disable=progress_disabled(logger))
        for i in bar:
            loss = self.step()
            bar.set_postfix(loss=f"{loss:.5f}")
            if (i + 1) % train.log_every == 0:
                recent = self.losses[-train.log_every:]
                logger.info("  step %d/%d  loss %.5f (median of last %d: %.5f)",
                            i + 1, steps, loss, len(recent), float(np.median(recent)))
            if train.checkpoint_every and (i + 1) % train.checkpoint_every == 0 and i + 1 < steps:
                checkpoint_save(self.model, self.out_path, self.config, step=len(self.losses))
        logger.info("[2/2] Saving checkpoint...")
        checkpoint_save(self.model, self.out_path, self.config, step=len(self.losses))
        return self.losses

    def save_results(self, out_dir=None) -> Path:
        """Training log as timestamped JSON plus a plain-text summary"""
        out_dir = Path(out_dir) if out_dir is not None else self.out_path.parent
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = out_dir / f"train_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"
        log_file.write_text(json.dumps(self.results, indent=2), encoding="utf-8")
        summary_file = out_dir / "train_summary.txt"
        with open(summary_file, "w", encoding="utf-8") as f:
            f.write("Skeletal Radiance Training Summary\n")
            f.write("=" * 50 + "\n\n")
            f.write(f"Variant: {self.results['variant']}\n")
            f.write(f"Date: {self.results['timestamp']}\n")
            f.write(f"Checkpoint: {self.out_path}\n")
            f.write(f"Steps: {len(self.losses)}\n")
            if self.losses:
                f.write(f"First loss: {self.losses[0]:.6f}\n")
                f.write(f"Final loss: {self.losses[-1]:.6f}\n")
                tail = self.losses[-min(50, len(self.losses)):]
                f.write(f"Median of last {len(tail)}: {float(np.median(tail)):.6f}\n")
        logger.info("Training log saved to %s", log_file)
        return log_file
