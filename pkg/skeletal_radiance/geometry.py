"""
Pinhole cameras, projection, ray generation, body bounding boxes and rigid transforms

Conventions: x_cam = R x_world + t, the camera looks along +z, pixel (u, v) has u along
columns and v along rows with pixel centers at integer coordinates and the origin at the
top-left pixel. The world is z-up.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BehindCameraError, GeometryError, OutOfImageError

logger = logging.getLogger(__name__)

DEPTH_EPS = 1e-9
NEAR_CLAMP = 1e-6
ROTATION_TOL = 1e-6


def _frozen(value, shape, name) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def check_rotation(rotation: np.ndarray, name: str = "rotation") -> None:
    if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ROTATION_TOL):
        raise GeometryError(f"{name} is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOL:
        raise GeometryError(f"{name} has determinant {np.linalg.det(rotation):.6f}, expected +1")


def axis_angle_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about a (normalized) axis"""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        raise GeometryError("rotation axis has zero length")
    x, y, z = axis / norm
    skew = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * skew + (1.0 - np.cos(angle)) * (skew @ skew)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera {K, [R|t]} with image size in pixels"""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _frozen(self.K, (3, 3), "K")
        R = _frozen(self.R, (3, 3), "R")
        t = _frozen(self.t, (3,), "t")
        if abs(K[1, 0]) > 1e-12 or abs(K[2, 0]) > 1e-12 or abs(K[2, 1]) > 1e-12:
            raise GeometryError("K must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError(f"focal lengths must be positive, got {K[0, 0]}, {K[1, 1]}")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise GeometryError("K[2, 2] must be 1")
        check_rotation(R, "camera rotation")
        if int(self.width) < 1 or int(self.height) < 1:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        K_inv = np.linalg.inv(K)
        K_inv.setflags(write=False)
        object.__setattr__(self, "_K_inv", K_inv)

    @classmethod
    def from_focal(cls, focal: float, width: int, height: int, R=None, t=None,
                   principal: Optional[Tuple[float, float]] = None) -> "Camera":
        cx, cy = principal if principal is not None else ((width - 1) / 2.0, (height - 1) / 2.0)
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if t is None else t, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K_inv(self) -> np.ndarray:
        return self._K_inv

    def scaled(self, factor: float) -> "Camera":
        """Same pose with intrinsics for an image resized by `factor`"""
        K = self.K.copy()
        K[0, 0] *= factor
        K[1, 1] *= factor
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return Camera(K, self.R, self.t, round(self.width * factor), round(self.height * factor))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.K.tolist(),
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Camera":
        try:
            return cls(data["K"], data["R"], data["t"], data["width"], data["height"])
        except KeyError as exc:
            raise GeometryError(f"camera entry is missing {exc}") from exc


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: Optional[float] = None
    far: Optional[float] = None

    def __post_init__(self):
        origin = _frozen(self.origin, (3,), "ray origin")
        direction = _frozen(self.direction, (3,), "ray direction")
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        if (self.near is None) != (self.far is None):
            raise GeometryError("ray bounds must be set together")
        if self.near is not None and not 0.0 < self.near < self.far:
            raise GeometryError(f"ray bounds must satisfy 0 < near < far, got ({self.near}, {self.far})")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def with_bounds(self, near: float, far: float) -> "Ray":
        return Ray(self.origin, self.direction, float(near), float(far))

    def at(self, s) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(s, dtype=np.float64), self.direction)


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.min, (3,), "box min")
        hi = _frozen(self.max, (3,), "box max")
        if np.any(lo > hi):
            raise GeometryError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.size <= 0.0))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        points = np.asarray(points)
        return np.all((points >= self.min - tol) & (points <= self.max + tol), axis=-1)

    def corners(self) -> np.ndarray:
        idx = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])
        return np.where(idx == 0, self.min, self.max)


@dataclass(frozen=True, eq=False)
class BodyPose:
    """Rigid transform from the world frame to the body-local frame"""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = _frozen(self.rotation, (3, 3), "pose rotation")
        check_rotation(rotation, "pose rotation")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", _frozen(self.translation, (3,), "pose translation"))

    def inverse(self) -> "BodyPose":
        return BodyPose(self.rotation.T, -self.rotation.T @ self.translation)

    def to_array(self) -> np.ndarray:
        """12 values, row-major [R | t]"""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1).reshape(-1)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "BodyPose":
        values = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(values[:, :3], values[:, 3])


def project_point(cam: Camera, x: Sequence[float]) -> Tuple[np.ndarray, float]:
    """World point to (pixel, camera depth); raises for points at or behind the camera plane"""
    x_cam = cam.R @ np.asarray(x, dtype=np.float64) + cam.t
    depth = float(x_cam[2])
    if depth <= DEPTH_EPS:
        raise BehindCameraError(f"point {tuple(np.round(x, 6))} has camera depth {depth:.3g}")
    uvw = cam.K @ x_cam
    return uvw[:2] / uvw[2], depth


def project_points(cam: Camera, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; pixels of points at or behind the camera plane are NaN"""
    points = np.asarray(points, dtype=np.float64)
    x_cam = points @ cam.R.T + cam.t
    depth = x_cam[..., 2]
    in_front = depth > DEPTH_EPS
    safe = np.where(in_front, depth, 1.0)
    uvw = x_cam @ cam.K.T
    pixels = uvw[..., :2] / safe[..., None]
    pixels = np.where(in_front[..., None], pixels, np.nan)
    return pixels, depth


def in_image(cam: Camera, pixels: np.ndarray) -> np.ndarray:
    """Pixels inside [-0.5, W-0.5] x [-0.5, H-0.5]; NaN counts as outside"""
    u, v = pixels[..., 0], pixels[..., 1]
    with np.errstate(invalid="ignore"):
        return (u >= -0.5) & (u <= cam.width - 0.5) & (v >= -0.5) & (v <= cam.height - 0.5)


def generate_rays(cam: Camera, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(origin 3-vector, unit directions N x 3) for pixel coordinates N x 2"""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    inside = in_image(cam, pixels)
    if not np.all(inside):
        bad = pixels[~inside][0]
        raise OutOfImageError(f"pixel ({bad[0]}, {bad[1]}) lies outside the {cam.width}x{cam.height} image")
    homogeneous = np.concatenate([pixels, np.ones((pixels.shape[0], 1))], axis=1)
    directions = homogeneous @ cam.K_inv.T @ cam.R
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return cam.center, directions


def generate_ray(cam: Camera, p: Sequence[float]) -> Ray:
    origin, directions = generate_rays(cam, np.asarray(p, dtype=np.float64)[None, :])
    return Ray(origin, directions[0])


def pixel_grid(cam: Camera) -> np.ndarray:
    """All pixel centers in row-major order as (u, v)"""
    v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)


def body_bbox(vertices: np.ndarray, margin: float = 0.025) -> Aabb:
    """Tight box of the vertices with each side scaled by (1 + margin) about its center"""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if vertices.shape[0] == 0:
        raise GeometryError("cannot bound an empty vertex set")
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + margin)
    return Aabb(center - half, center + half)


def ray_box_bounds_batch(origins: np.ndarray, directions: np.ndarray,
                         box: Aabb) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test for many rays: (near, far, hit); near is clamped to NEAR_CLAMP"""
    directions = np.atleast_2d(directions)
    origins = np.broadcast_to(origins, directions.shape)
    parallel = np.abs(directions) < 1e-12
    outside_slab = parallel & ((origins < box.min) | (origins > box.max))
    safe = np.where(parallel, 1.0, directions)
    t1 = (box.min - origins) / safe
    t2 = (box.max - origins) / safe
    t_lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
    t_hi = np.where(parallel, np.inf, np.maximum(t1, t2))
    enter = t_lo.max(axis=1)
    leave = t_hi.min(axis=1)
    near = np.maximum(enter, NEAR_CLAMP)
    hit = ~outside_slab.any(axis=1) & (enter <= leave) & (leave >= near)
    return np.where(hit, near, 0.0), np.where(hit, leave, 0.0), hit


def ray_box_bounds(ray: Ray, box: Aabb) -> Optional[Tuple[float, float]]:
    near, far, hit = ray_box_bounds_batch(ray.origin[None, :], ray.direction[None, :], box)
    if not hit[0]:
        return None
    return float(near[0]), float(far[0])


def world_to_body(pose: BodyPose, x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ pose.rotation.T + pose.translation


def body_to_world(pose: BodyPose, y: np.ndarray) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) - pose.translation) @ pose.rotation


def transform_camera(cam: Camera, rotation: np.ndarray, translation: np.ndarray) -> Camera:
    """The camera seeing the same image after the world moves by x -> rotation x + translation"""
    R = cam.R @ rotation.T
    return Camera(cam.K, R, cam.t - R @ translation, cam.width, cam.height)


def look_at_camera(eye: Sequence[float], target: Sequence[float], focal: float, width: int,
                   height: int, up: Sequence[float] = (0.0, 0.0, 1.0)) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    if np.linalg.norm(forward) < 1e-12:
        raise GeometryError("camera eye coincides with its target")
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise GeometryError("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera.from_focal(focal, width, height, R=R, t=-R @ eye)


def orbit_camera(azimuth_deg: float, elevation_deg: float, distance: float, target: Sequence[float],
                 focal: float, width: int, height: int) -> Camera:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    offset = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return look_at_camera(np.asarray(target, dtype=np.float64) + offset, target, focal, width, height)


def ring_cameras(count: int, distance: float, target: Sequence[float], focal: float, width: int,
                 height: int, elevation_deg: float = 10.0) -> List[Camera]:
    """Cameras evenly spaced in azimuth around the target"""
    return [
        orbit_camera(360.0 * k / count + 15.0, elevation_deg, distance, target, focal, width, height)
        for k in range(count)
    ]
