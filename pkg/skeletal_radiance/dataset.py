"""
Multi-view capture sets of synthetic subjects and their on-disk layout

    manifest.json
    img/{subject}/{cam}/{t}.png     8-bit RGB
    mask/{subject}/{cam}/{t}.png    8-bit, 255 = foreground
    verts/{subject}/{t}.bin         u32 L | L x 3 f64 world vertices | 12 f64 row-major pose
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from tqdm import tqdm

from .errors import DatasetError
from .geometry import BodyPose, Camera, ring_cameras
from .log import progress_disabled
from .synth import generate_subject, pose_subject, render_gt

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "skeletal-radiance-capture"
FORMAT_VERSION = 1
CAMERA_DISTANCE = 3.2
CAMERA_TARGET = (0.0, 0.0, 0.65)


@dataclass(eq=False)
class SubjectCapture:
    """All views and frames of one subject; images (C, T, H, W, 3), masks (C, T, H, W)"""

    name: str
    seed: int
    images: np.ndarray
    masks: np.ndarray
    vertices: np.ndarray
    poses: List[BodyPose]

    @property
    def frame_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[1]

    def check_frame(self, t: int) -> None:
        if not 0 <= t < self.frame_count:
            raise DatasetError(f"frame {t} outside [0, {self.frame_count}) for {self.name}")

    def local_vertices(self, t: int) -> np.ndarray:
        self.check_frame(t)
        pose = self.poses[t]
        return self.vertices[t] @ pose.rotation.T + pose.translation


@dataclass(eq=False)
class CaptureSet:
    cameras: List[Camera]
    subjects: List[SubjectCapture]
    input_views: List[int] = field(default_factory=list)
    query_views: List[int] = field(default_factory=list)

    @property
    def view_count(self) -> int:
        return len(self.cameras)

    @property
    def frame_count(self) -> int:
        return self.subjects[0].frame_count if self.subjects else 0

    @property
    def height(self) -> int:
        return self.cameras[0].height

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def subject_names(self) -> List[str]:
        return [s.name for s in self.subjects]

    def subject(self, key) -> SubjectCapture:
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < len(self.subjects):
                raise DatasetError(f"subject index {key} outside [0, {len(self.subjects)})")
            return self.subjects[int(key)]
        for s in self.subjects:
            if s.name == key:
                return s
        raise DatasetError(f"unknown subject {key!r}; known: {', '.join(self.subject_names)}")

    def subset(self, names: Sequence[str]) -> "CaptureSet":
        return CaptureSet(self.cameras, [self.subject(n) for n in names],
                          list(self.input_views), list(self.query_views))


def subject_name(index: int) -> str:
    return f"subject_{index:03d}"


def default_cameras(views: int, resolution: int) -> List[Camera]:
    return ring_cameras(views, CAMERA_DISTANCE, CAMERA_TARGET, focal=2.0 * resolution,
                        width=resolution, height=resolution)


def default_view_roles(views: int) -> Tuple[List[int], List[int]]:
    """First min(3, C-1) views are inputs, the rest are held-out query views"""
    n_inputs = max(1, min(3, views - 1))
    return list(range(n_inputs)), list(range(n_inputs, views))


def generate_captures(seed: int = 0, subjects: int = 8, frames: int = 30, views: int = 4,
                      resolution: int = 64, first_subject: int = 0) -> CaptureSet:
    """Render every subject, view and frame with the analytic raytracer"""
    if resolution % 2:
        raise DatasetError(f"resolution must be even, got {resolution}")
    cameras = default_cameras(views, resolution)
    inputs, queries = default_view_roles(views)
    captured = []
    jobs = [(k, t) for k in range(first_subject, first_subject + subjects) for t in range(frames)]
    images = {}
    masks = {}
    bodies = {}
    specs = {k: generate_subject(seed * 1000 + k) for k in range(first_subject, first_subject + subjects)}
    for k, t in tqdm(jobs, desc="Rendering captures", disable=progress_disabled(logger)):
        body = pose_subject(specs[k], t)
        bodies[k, t] = body
        for c, cam in enumerate(cameras):
            images[k, c, t], masks[k, c, t] = render_gt(body, specs[k], cam)
    for k in range(first_subject, first_subject + subjects):
        captured.append(SubjectCapture(
            name=subject_name(k),
            seed=specs[k].seed,
            images=np.stack([np.stack([images[k, c, t] for t in range(frames)]) for c in range(views)]),
            masks=np.stack([np.stack([masks[k, c, t] for t in range(frames)]) for c in range(views)]),
            vertices=np.stack([bodies[k, t].vertices for t in range(frames)]),
            poses=[bodies[k, t].pose for t in range(frames)],
        ))
    logger.info("Generated %d subjects x %d frames x %d views at %dx%d",
                subjects, frames, views, resolution, resolution)
    return CaptureSet(cameras, captured, inputs, queries)


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def encode_vertices(vertices: np.ndarray, pose: BodyPose) -> bytes:
    return (struct.pack("<I", vertices.shape[0])
            + np.ascontiguousarray(vertices, dtype="<f8").tobytes()
            + pose.to_array().astype("<f8").tobytes())


def decode_vertices(data: bytes, source: str):
    if len(data) < 4:
        raise DatasetError(f"{source}: vertex file is truncated")
    (count,) = struct.unpack("<I", data[:4])
    expected = 4 + 8 * (3 * count + 12)
    if len(data) != expected:
        raise DatasetError(f"{source}: expected {expected} bytes for {count} vertices, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=4).astype(np.float64)
    vertices = values[:3 * count].reshape(count, 3)
    try:
        pose = BodyPose.from_array(values[3 * count:])
    except ValueError as exc:
        raise DatasetError(f"{source}: invalid body pose ({exc})") from exc
    return vertices, pose


def write_dataset(captures: CaptureSet, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "created": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        "width": captures.width,
        "height": captures.height,
        "frame_count": captures.frame_count,
        "cameras": [cam.to_dict() for cam in captures.cameras],
        "input_views": captures.input_views,
        "query_views": captures.query_views,
        "subjects": [
            {"name": s.name, "seed": s.seed, "vertex_count": s.vertex_count} for s in captures.subjects
        ],
    }
    jobs = [(s, t) for s in captures.subjects for t in range(s.frame_count)]
    for s, t in tqdm(jobs, desc="Writing dataset", disable=progress_disabled(logger)):
        for c in range(captures.view_count):
            pixels = np.round(np.clip(s.images[c, t], 0.0, 1.0) * 255.0).astype(np.uint8)
            _write_png(out_dir / "img" / s.name / str(c) / f"{t}.png", pixels)
            _write_png(out_dir / "mask" / s.name / str(c) / f"{t}.png",
                       s.masks[c, t].astype(np.uint8) * 255)
        verts_path = out_dir / "verts" / s.name / f"{t}.bin"
        verts_path.parent.mkdir(parents=True, exist_ok=True)
        verts_path.write_bytes(encode_vertices(s.vertices[t], s.poses[t]))
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info("Wrote dataset with %d subjects to %s", len(captures.subjects), out_dir)
    return out_dir


def _read_png(path: Path, mode: str, shape) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing image {path}")
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert(mode))
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"corrupt image {path}: {exc}") from exc
    if array.shape[:2] != shape:
        raise DatasetError(f"{path} has size {array.shape[1]}x{array.shape[0]}, expected {shape[1]}x{shape[0]}")
    return array


def read_manifest(data_dir) -> Dict:
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetError(f"{data_dir}: missing {MANIFEST_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{manifest_path}: corrupt manifest ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetError(f"{manifest_path}: not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    for key in ("width", "height", "frame_count", "cameras", "subjects"):
        if key not in manifest:
            raise DatasetError(f"{manifest_path}: missing key {key!r}")
    return manifest


def read_dataset(data_dir, subjects: Optional[Sequence[str]] = None) -> CaptureSet:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    try:
        cameras = [Camera.from_dict(c) for c in manifest["cameras"]]
    except ValueError as exc:
        raise DatasetError(f"{data_dir}: invalid camera entry ({exc})") from exc
    shape = (int(manifest["height"]), int(manifest["width"]))
    frames = int(manifest["frame_count"])
    entries = manifest["subjects"]
    if subjects is not None:
        known = {e["name"] for e in entries}
        unknown = [n for n in subjects if n not in known]
        if unknown:
            raise DatasetError(f"{data_dir}: unknown subjects {', '.join(unknown)}")
        entries = [e for e in entries if e["name"] in set(subjects)]
    captured = []
    for entry in tqdm(entries, desc="Reading dataset", disable=progress_disabled(logger)):
        name = entry["name"]
        images = np.zeros((len(cameras), frames) + shape + (3,))
        masks = np.zeros((len(cameras), frames) + shape, dtype=bool)
        vertices = []
        poses = []
        for t in range(frames):
            for c in range(len(cameras)):
                images[c, t] = _read_png(data_dir / "img" / name / str(c) / f"{t}.png", "RGB", shape) / 255.0
                masks[c, t] = _read_png(data_dir / "mask" / name / str(c) / f"{t}.png", "L", shape) > 127
            verts_path = data_dir / "verts" / name / f"{t}.bin"
            if not verts_path.is_file():
                raise DatasetError(f"missing vertex file {verts_path}")
            verts, pose = decode_vertices(verts_path.read_bytes(), str(verts_path))
            vertices.append(verts)
            poses.append(pose)
        if len({v.shape[0] for v in vertices}) > 1:
            raise DatasetError(f"{data_dir}: vertex count of {name} changes between frames")
        captured.append(SubjectCapture(name, int(entry.get("seed", 0)), images, masks, np.stack(vertices), poses))
    inputs = manifest.get("input_views")
    queries = manifest.get("query_views")
    if inputs is None:
        inputs, queries = default_view_roles(len(cameras))
    logger.info("Read %d subjects x %d frames x %d views from %s", len(captured), frames, len(cameras), data_dir)
    return CaptureSet(cameras, captured, list(inputs), list(queries or []))
