"""
Synthetic articulated performers built from capsules, and an analytic ground-truth raytracer

A subject is a tree of nine capsule bones rooted at the pelvis. Each bone swings about a
fixed axis with a sinusoid of its own amplitude and phase; the root yaws and sways. Body
vertices are a fixed lattice on every capsule surface, so vertex i tracks the same
surface point in every frame.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .geometry import BodyPose, Camera, axis_angle_matrix, generate_rays, pixel_grid
from .tensor import make_rng

logger = logging.getLogger(__name__)

SUBJECT_STREAM = 0x5B
AMBIENT = 0.3
LIGHT_DIRECTION = np.array([0.4, -0.6, 0.7]) / np.linalg.norm([0.4, -0.6, 0.7])
DEFAULT_PERIOD = 30
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

# name, parent, length, radius, rest direction, attach offset (parent frame), swing axis,
# amplitude range (rad), vertex count
_SKELETON = (
    ("pelvis", -1, 0.14, 0.13, (0, 0, 1), (0.0, 0.0, 0.0), (1, 0, 0), (0.0, 0.0), 60),
    ("spine", 0, 0.32, 0.12, (0, 0, 1), (0.0, 0.0, 0.14), (1, 0, 0), (0.04, 0.12), 100),
    ("head", 1, 0.10, 0.10, (0, 0, 1), (0.0, 0.0, 0.44), (0, 1, 0), (0.05, 0.15), 60),
    ("l_upper_arm", 1, 0.26, 0.045, (-0.25, 0, -1), (-0.19, 0.0, 0.28), (1, 0, 0), (0.3, 0.6), 60),
    ("r_upper_arm", 1, 0.26, 0.045, (0.25, 0, -1), (0.19, 0.0, 0.28), (1, 0, 0), (0.3, 0.6), 60),
    ("l_forearm", 3, 0.24, 0.04, (-0.25, 0, -1), None, (1, 0, 0), (0.2, 0.5), 50),
    ("r_forearm", 4, 0.24, 0.04, (0.25, 0, -1), None, (1, 0, 0), (0.2, 0.5), 50),
    ("l_thigh", 0, 0.38, 0.07, (0, 0, -1), (-0.09, 0.0, 0.0), (1, 0, 0), (0.25, 0.5), 80),
    ("r_thigh", 0, 0.38, 0.07, (0, 0, -1), (0.09, 0.0, 0.0), (1, 0, 0), (0.25, 0.5), 80),
)
BONE_NAMES = tuple(row[0] for row in _SKELETON)
VERTEX_COUNT = sum(row[-1] for row in _SKELETON)


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class BoneSpec:
    name: str
    parent: int
    length: float
    radius: float
    color: Tuple[float, float, float]
    stripe_period: float
    stripe_color: Tuple[float, float, float]
    rest_dir: Tuple[float, float, float]
    attach: Tuple[float, float, float]
    swing_axis: Tuple[float, float, float]
    amplitude: float
    phase: float
    vertex_count: int


@dataclass(frozen=True)
class SubjectSpec:
    seed: int
    bones: Tuple[BoneSpec, ...]
    root_height: float = 0.55
    yaw_amplitude: float = 0.0
    yaw_phase: float = 0.0
    sway_amplitude: float = 0.0
    period: int = DEFAULT_PERIOD

    @property
    def vertex_count(self) -> int:
        return sum(b.vertex_count for b in self.bones)

    @property
    def angular_step(self) -> float:
        return 2.0 * np.pi / self.period

    def without_motion(self) -> "SubjectSpec":
        bones = tuple(replace(b, amplitude=0.0) for b in self.bones)
        return replace(self, bones=bones, yaw_amplitude=0.0, sway_amplitude=0.0)

    def motion_bound(self) -> float:
        """Upper bound on how far any vertex moves between consecutive frames"""
        reach = sum(b.length + 2.0 * b.radius + float(np.linalg.norm(b.attach)) for b in self.bones)
        amplitude = self.yaw_amplitude + sum(abs(b.amplitude) for b in self.bones)
        return self.angular_step * (amplitude * reach + self.sway_amplitude)


@dataclass(frozen=True, eq=False)
class BodyFrame:
    t: int
    angles: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    vertices: np.ndarray
    bone_of_vertex: np.ndarray
    pose: BodyPose

    @property
    def local_vertices(self) -> np.ndarray:
        return self.vertices @ self.pose.rotation.T + self.pose.translation

    @property
    def root(self) -> np.ndarray:
        return -self.pose.rotation.T @ self.pose.translation


def generate_subject(seed: int) -> SubjectSpec:
    """Deterministic subject: dimensions, colors, stripes and motion drawn from fixed ranges"""
    rng = make_rng(seed, SUBJECT_STREAM)
    scale = rng.uniform(0.9, 1.1)
    bones = []
    for name, parent, length, radius, rest, attach, axis, amp_range, count in _SKELETON:
        bone_length = length * scale * rng.uniform(0.9, 1.1)
        bone_radius = radius * rng.uniform(0.85, 1.15)
        if attach is None:
            parent_bone = bones[parent]
            attach = tuple(parent_bone.length * _unit(parent_bone.rest_dir))
        else:
            attach = tuple(scale * np.asarray(attach, dtype=np.float64))
        bones.append(BoneSpec(
            name=name,
            parent=parent,
            length=float(bone_length),
            radius=float(bone_radius),
            color=tuple(float(c) for c in rng.uniform(0.15, 0.95, size=3)),
            stripe_period=float(rng.uniform(0.06, 0.14)),
            stripe_color=tuple(float(c) for c in rng.uniform(0.15, 0.95, size=3)),
            rest_dir=tuple(float(c) for c in _unit(rest)),
            attach=tuple(float(c) for c in attach),
            swing_axis=tuple(float(c) for c in _unit(axis)),
            amplitude=float(rng.uniform(*amp_range)) if amp_range[1] > 0 else 0.0,
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
            vertex_count=count,
        ))
    return SubjectSpec(
        seed=seed,
        bones=tuple(bones),
        root_height=float(0.55 * scale),
        yaw_amplitude=float(rng.uniform(0.1, 0.3)),
        yaw_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        sway_amplitude=float(rng.uniform(0.02, 0.05)),
    )


def _bone_basis(rest_dir) -> np.ndarray:
    """Columns e1, e2, axis of a right-handed frame around the rest direction"""
    axis = _unit(rest_dir)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = _unit(np.cross(helper, axis))
    e2 = np.cross(axis, e1)
    return np.stack([e1, e2, axis], axis=1)


def capsule_lattice(length: float, radius: float, count: int) -> np.ndarray:
    """`count` points spread over a capsule along local z from 0 to length"""
    profile = np.pi * radius + length
    s = (np.arange(count) + 0.5) / count * profile
    phi = np.arange(count) * GOLDEN_ANGLE
    cap = 0.5 * np.pi * radius
    rho = np.empty(count)
    z = np.empty(count)
    bottom = s < cap
    top = s > cap + length
    middle = ~bottom & ~top
    theta = s[bottom] / radius
    rho[bottom] = radius * np.sin(theta)
    z[bottom] = -radius * np.cos(theta)
    rho[middle] = radius
    z[middle] = s[middle] - cap
    theta = (s[top] - cap - length) / radius
    rho[top] = radius * np.cos(theta)
    z[top] = length + radius * np.sin(theta)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def pose_subject(spec: SubjectSpec, t: int) -> BodyFrame:
    """Posed capsule segments and lattice vertices of frame t"""
    omega = spec.angular_step
    yaw = spec.yaw_amplitude * np.sin(omega * t + spec.yaw_phase)
    sway = spec.sway_amplitude * np.sin(omega * t + spec.yaw_phase)
    root = np.array([sway, 0.5 * spec.sway_amplitude * np.sin(2.0 * (omega * t + spec.yaw_phase)),
                     spec.root_height])
    root_rotation = axis_angle_matrix((0.0, 0.0, 1.0), yaw)

    count = len(spec.bones)
    rotations = np.zeros((count, 3, 3))
    starts = np.zeros((count, 3))
    ends = np.zeros((count, 3))
    angles = np.zeros(count)
    vertices = []
    owners = []
    for k, bone in enumerate(spec.bones):
        angles[k] = bone.amplitude * np.sin(omega * t + bone.phase)
        if bone.parent < 0:
            parent_rotation, parent_joint = root_rotation, root
        else:
            parent_rotation, parent_joint = rotations[bone.parent], starts[bone.parent]
        rotations[k] = parent_rotation @ axis_angle_matrix(bone.swing_axis, angles[k])
        starts[k] = parent_joint + parent_rotation @ np.asarray(bone.attach)
        ends[k] = starts[k] + bone.length * (rotations[k] @ np.asarray(bone.rest_dir))
        local = capsule_lattice(bone.length, bone.radius, bone.vertex_count)
        vertices.append(starts[k] + local @ (rotations[k] @ _bone_basis(bone.rest_dir)).T)
        owners.append(np.full(bone.vertex_count, k, dtype=np.int64))

    pose = BodyPose(root_rotation.T, -root_rotation.T @ root)
    return BodyFrame(
        t=int(t),
        angles=angles,
        starts=starts,
        ends=ends,
        vertices=np.concatenate(vertices) if vertices else np.zeros((0, 3)),
        bone_of_vertex=np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64),
        pose=pose,
    )


def intersect_capsules(origins: np.ndarray, directions: np.ndarray, starts: np.ndarray,
                       ends: np.ndarray, radii: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Nearest ray hit against a set of capsules.

    Returns (depth, bone, normal); rays that miss get depth inf and bone -1. Ray origins
    must lie outside every capsule.
    """
    directions = np.atleast_2d(directions)
    n = directions.shape[0]
    origins = np.broadcast_to(origins, (n, 3))
    best = np.full(n, np.inf)
    bone = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    for k in range(starts.shape[0]):
        a = ends[k] - starts[k]
        height = np.linalg.norm(a)
        axis = a / height
        r = radii[k]
        oc = origins - starts[k]
        d_ax = directions @ axis
        oc_ax = oc @ axis
        d_perp = directions - d_ax[:, None] * axis
        oc_perp = oc - oc_ax[:, None] * axis
        qa = np.einsum("ij,ij->i", d_perp, d_perp)
        qb = 2.0 * np.einsum("ij,ij->i", d_perp, oc_perp)
        qc = np.einsum("ij,ij->i", oc_perp, oc_perp) - r * r
        disc = qb * qb - 4.0 * qa * qc
        ok = (qa > 1e-14) & (disc >= 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            s_cyl = (-qb - np.sqrt(np.where(ok, disc, 0.0))) / (2.0 * np.where(ok, qa, 1.0))
        axial = oc_ax + s_cyl * d_ax
        s_cyl = np.where(ok & (s_cyl > 0.0) & (axial >= 0.0) & (axial <= height), s_cyl, np.inf)
        candidates = [s_cyl]
        for center in (starts[k], ends[k]):
            oc_s = origins - center
            b = np.einsum("ij,ij->i", oc_s, directions)
            c = np.einsum("ij,ij->i", oc_s, oc_s) - r * r
            disc_s = b * b - c
            s_sph = -b - np.sqrt(np.maximum(disc_s, 0.0))
            candidates.append(np.where((disc_s >= 0.0) & (s_sph > 0.0), s_sph, np.inf))
        s_hit = np.minimum.reduce(candidates)
        closer = s_hit < best
        if not np.any(closer):
            continue
        points = origins[closer] + s_hit[closer, None] * directions[closer]
        rel = points - starts[k]
        along = np.clip(rel @ axis, 0.0, height)
        radial = rel - along[:, None] * axis
        normal[closer] = radial / np.linalg.norm(radial, axis=1, keepdims=True)
        best[closer] = s_hit[closer]
        bone[closer] = k
    return best, bone, normal


def surface_albedo(points: np.ndarray, bone: np.ndarray, frame: BodyFrame, spec: SubjectSpec) -> np.ndarray:
    """Striped base color of points lying on the given bones"""
    albedo = np.zeros((points.shape[0], 3))
    for k, b in enumerate(spec.bones):
        sel = bone == k
        if not np.any(sel):
            continue
        axis = _unit(frame.ends[k] - frame.starts[k])
        along = (points[sel] - frame.starts[k]) @ axis
        stripe = np.floor(along / (0.5 * b.stripe_period)).astype(np.int64) % 2 == 1
        albedo[sel] = np.where(stripe[:, None], np.asarray(b.stripe_color), np.asarray(b.color))
    return albedo


def segment_distance(points: np.ndarray, frame: BodyFrame) -> Tuple[np.ndarray, np.ndarray]:
    """Distance from each point to the nearest bone segment, and that bone's index"""
    points = np.atleast_2d(points)
    best = np.full(points.shape[0], np.inf)
    owner = np.full(points.shape[0], -1, dtype=np.int64)
    for k in range(frame.starts.shape[0]):
        a = frame.ends[k] - frame.starts[k]
        rel = points - frame.starts[k]
        s = np.clip(rel @ a / (a @ a), 0.0, 1.0)
        dist = np.linalg.norm(rel - s[:, None] * a, axis=1)
        closer = dist < best
        best[closer] = dist[closer]
        owner[closer] = k
    return best, owner


def inside_body(points: np.ndarray, frame: BodyFrame, spec: SubjectSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(inside flag, owning bone) for points tested against every capsule"""
    points = np.atleast_2d(points)
    inside = np.zeros(points.shape[0], dtype=bool)
    owner = np.full(points.shape[0], -1, dtype=np.int64)
    for k, b in enumerate(spec.bones):
        a = frame.ends[k] - frame.starts[k]
        rel = points - frame.starts[k]
        s = np.clip(rel @ a / (a @ a), 0.0, 1.0)
        hit = (np.linalg.norm(rel - s[:, None] * a, axis=1) <= b.radius) & ~inside
        inside |= hit
        owner[hit] = k
    return inside, owner


def render_gt(frame: BodyFrame, spec: SubjectSpec, cam: Camera,
              light: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic image (H x W x 3 in [0, 1], black background) and exact foreground mask"""
    image = np.zeros((cam.height * cam.width, 3))
    mask = np.zeros(cam.height * cam.width, dtype=bool)
    if spec.bones:
        light = LIGHT_DIRECTION if light is None else _unit(light)
        origin, directions = generate_rays(cam, pixel_grid(cam))
        radii = np.array([b.radius for b in spec.bones])
        depth, bone, normal = intersect_capsules(origin, directions, frame.starts, frame.ends, radii)
        mask = bone >= 0
        points = origin + depth[mask, None] * directions[mask]
        albedo = surface_albedo(points, bone[mask], frame, spec)
        shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, normal[mask] @ light)
        image[mask] = albedo * shade[:, None]
    return image.reshape(cam.height, cam.width, 3), mask.reshape(cam.height, cam.width)
