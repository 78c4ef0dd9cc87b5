"""
Skeletal radiance field

Per frame, body vertices are projected into every input view at the current and memory
frames to build a skeletal feature bank. A temporal attention fuses each vertex's memory
observations into its current feature, the fused features are diffused into a sparse
body-local voxel grid, and query points read the grid trilinearly. A multi-view
cross-attention combines the skeletal and pixel-aligned features of each view, and two
MLP heads decode density and color.
"""

import logging
from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import FieldConfig
from .dataset import CaptureSet, SubjectCapture
from .encoder import FeatureMap, ImageEncoder, sample_pixel_aligned_batch
from .errors import DatasetError, DimensionError, GeometryError
from .geometry import Aabb, BodyPose, Camera, body_bbox, project_points, world_to_body
from .nn import Linear, Module, SparseConv3d
from .tensor import (Tensor, concat, index_add, make_rng, matmul, mul, relu, reshape, scale,
                     sigmoid, softmax_rows, softplus, take_rows, transpose, weighted_sum)

logger = logging.getLogger(__name__)

FIELD_STREAM = 0xF1
CORNERS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)

FeatureCache = Dict[Tuple[int, int], FeatureMap]


@dataclass(eq=False)
class SkeletalBank:
    """Vertex features (L, C, M', d) and validity (L, C, M'); slab 0 is the current frame"""

    features: Tensor
    valid: np.ndarray
    frames: Tuple[int, ...]
    views: Tuple[int, ...]

    @property
    def memory_count(self) -> int:
        return len(self.frames) - 1


@dataclass(eq=False)
class GridSpec:
    """Body-local voxel lattice: cells of edge `edge` starting at bbox.min"""

    bbox: Aabb
    edge: float
    dims: Tuple[int, int, int]

    @classmethod
    def from_vertices(cls, local_vertices: np.ndarray, divisions: int = 32, margin: float = 0.025) -> "GridSpec":
        bbox = body_bbox(local_vertices, margin)
        longest = float(bbox.size.max())
        if longest <= 0.0:
            raise GeometryError("body bounding box is empty")
        edge = longest / divisions
        dims = tuple(int(n) for n in np.clip(np.ceil(bbox.size / edge - 1e-9), 1, None))
        return cls(bbox, edge, dims)

    def continuous(self, points: np.ndarray) -> np.ndarray:
        """Coordinates in cell units where cell centers sit on integers"""
        return (np.asarray(points) - self.bbox.min) / self.edge - 0.5

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        cells = np.floor((np.asarray(points) - self.bbox.min) / self.edge).astype(np.int64)
        return np.clip(cells, 0, np.asarray(self.dims) - 1)

    def center_of(self, cells: np.ndarray) -> np.ndarray:
        return self.bbox.min + (np.asarray(cells) + 0.5) * self.edge


@dataclass(eq=False)
class VoxelGrid:
    """Sparse per-view feature grid: features (C, N, d) on active cells `coords`"""

    spec: GridSpec
    coords: np.ndarray
    features: Tensor
    lookup: np.ndarray

    @property
    def occupancy(self) -> np.ndarray:
        return self.lookup >= 0


@dataclass(eq=False)
class FrameState:
    """Everything a query at frame t needs: input cameras, feature maps, grid and bounds"""

    subject: str
    t: int
    views: Tuple[int, ...]
    cameras: List[Camera]
    pose: BodyPose
    bbox: Aabb
    feature_maps: List[FeatureMap]
    bank: Optional[SkeletalBank] = None
    fused: Optional[Tensor] = None
    grid: Optional[VoxelGrid] = None


class TemporalTransformer(Module):
    """q, k: d -> d0 and v: d -> d so the residual with the current feature is well-typed"""

    def __init__(self, d: int, d0: int, rng: np.random.Generator):
        self.query = Linear(d, d0, rng)
        self.key = Linear(d, d0, rng)
        self.value = Linear(d, d, rng)
        self.d0 = d0


class VoxelDiffusion(Module):
    def __init__(self, d_in: int, d_vox: int, rng: np.random.Generator):
        self.conv1 = SparseConv3d(d_in, d_vox, rng)
        self.conv2 = SparseConv3d(d_vox, d_vox, rng)


class MultiViewTransformer(Module):
    """Shared k for skeletal and pixel features, v into the fused width d1"""

    def __init__(self, d: int, d1: int, rng: np.random.Generator, attention: bool = True,
                 separate_query: bool = False):
        self.key = Linear(d, d1, rng) if attention else None
        self.query = Linear(d, d1, rng) if attention and separate_query else None
        self.value = Linear(d, d1, rng)
        self.d1 = d1


class DensityHead(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, zero_init: bool = False):
        self.layers = [Linear(d_in, hidden, rng), Linear(hidden, hidden, rng), Linear(hidden, hidden, rng),
                       Linear(hidden, 1, rng, zero_init=zero_init)]

    def __call__(self, z: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            z = relu(layer(z))
        out = softplus(self.layers[-1](z))
        return reshape(out, out.shape[:-1])


class ColorHead(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, zero_init: bool = False):
        self.layers = [Linear(d_in, hidden, rng), Linear(hidden, 3, rng, zero_init=zero_init)]

    def __call__(self, h: Tensor) -> Tensor:
        return sigmoid(self.layers[1](relu(self.layers[0](h))))


def memory_frames(t: int, offsets: Sequence[int], frame_count: int, clamp: bool = False) -> Tuple[int, ...]:
    frames = []
    for offset in offsets:
        f = t + offset
        if not 0 <= f < frame_count:
            if not clamp:
                raise DatasetError(f"memory frame {f} (t={t}, offset {offset}) outside [0, {frame_count})")
            clamped = min(max(f, 0), frame_count - 1)
            logger.debug("memory frame %d clamped to %d", f, clamped)
            f = clamped
        frames.append(f)
    return tuple(frames)


def cached_feature_map(encoder: ImageEncoder, subject: SubjectCapture, view: int, t: int,
                       cache: Optional[FeatureCache]) -> FeatureMap:
    if cache is not None and (view, t) in cache:
        return cache[view, t]
    fm = encoder.encode(subject.images[view, t], view, t)
    if cache is not None:
        cache[view, t] = fm
    return fm


def build_skeletal_bank(subject: SubjectCapture, cameras: Sequence[Camera], views: Sequence[int], t: int,
                        memory_offsets: Sequence[int], encoder: ImageEncoder, clamp: bool = False,
                        cache: Optional[FeatureCache] = None) -> SkeletalBank:
    """Sample every input view's features at the projected body vertices of t and its memory frames"""
    subject.check_frame(t)
    frames = (t,) + memory_frames(t, memory_offsets, subject.frame_count, clamp)
    n_vertices, n_views, n_frames = subject.vertex_count, len(views), len(frames)
    maps = []
    pixels = np.zeros((n_vertices, n_views, n_frames, 2))
    in_front = np.zeros((n_vertices, n_views, n_frames), dtype=bool)
    map_index = np.zeros((n_vertices, n_views, n_frames), dtype=np.int64)
    for ci, c in enumerate(views):
        for m, f in enumerate(frames):
            maps.append(cached_feature_map(encoder, subject, c, f, cache))
            uv, depth = project_points(cameras[c], subject.vertices[f])
            pixels[:, ci, m] = uv
            in_front[:, ci, m] = depth > 1e-9
            map_index[:, ci, m] = ci * n_frames + m
    features, valid = sample_pixel_aligned_batch(maps, map_index.reshape(-1), pixels.reshape(-1, 2),
                                                 mask=in_front.reshape(-1))
    d = maps[0].channels
    return SkeletalBank(reshape(features, (n_vertices, n_views, n_frames, d)),
                        valid.reshape(n_vertices, n_views, n_frames), frames, tuple(views))


def temporal_attention(bank: SkeletalBank, weights: TemporalTransformer) -> Tensor:
    """(L*C, 1, M) softmax weights of each current feature over its valid memory features"""
    n_vertices, n_views, n_frames, d = bank.features.shape
    flat = reshape(bank.features, (n_vertices * n_views, n_frames, d))
    q = weights.query(flat[:, 0:1, :])
    k = weights.key(flat[:, 1:, :])
    logits = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(weights.d0))
    mask = bank.valid.reshape(n_vertices * n_views, n_frames)[:, None, 1:]
    return softmax_rows(logits, mask=mask)


def temporal_fuse(bank: SkeletalBank, weights: Optional[TemporalTransformer]) -> Tensor:
    """
    s' = att v(memory) + s_t per vertex and view, (L, C, d).

    Without weights the valid features of all timesteps are averaged instead.
    """
    n_vertices, n_views, n_frames, d = bank.features.shape
    if n_vertices * n_views == 0:
        raise DimensionError("skeletal bank is empty")
    flat = reshape(bank.features, (n_vertices * n_views, n_frames, d))
    if weights is None:
        valid = bank.valid.reshape(n_vertices * n_views, n_frames).astype(np.float64)
        average = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1.0)
        return reshape(weighted_sum(average, flat), (n_vertices, n_views, d))
    current = flat[:, 0:1, :]
    if n_frames == 1:
        return reshape(current, (n_vertices, n_views, d))
    att = temporal_attention(bank, weights)
    fused = matmul(att, weights.value(flat[:, 1:, :])) + current
    return reshape(fused, (n_vertices, n_views, d))


def diffuse_to_voxels(fused: Tensor, local_vertices: np.ndarray, spec: GridSpec,
                      diffusion: VoxelDiffusion) -> VoxelGrid:
    """Scatter-mean vertex features into cells, then two sparse 3x3x3 convs with relu"""
    n_vertices, n_views, d = fused.shape
    if local_vertices.shape[0] != n_vertices:
        raise DimensionError(f"{local_vertices.shape[0]} vertices for {n_vertices} fused features")
    linear = np.ravel_multi_index(spec.cell_of(local_vertices).T, spec.dims)
    active, inverse, counts = np.unique(linear, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    coords = np.stack(np.unravel_index(active, spec.dims), axis=1).astype(np.int64)
    share = np.repeat((1.0 / counts[inverse])[:, None], n_views * d, axis=1)
    rows = mul(reshape(fused, (n_vertices, n_views * d)), Tensor(share, dtype=fused.dtype))
    cells = index_add(rows, inverse, active.shape[0])
    x = transpose(reshape(cells, (active.shape[0], n_views, d)), (1, 0, 2))
    h, coords = diffusion.conv1(x, coords, spec.dims)
    h, coords = diffusion.conv2(relu(h), coords, spec.dims)
    lookup = np.full(spec.dims, -1, dtype=np.int64)
    lookup[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(coords.shape[0])
    return VoxelGrid(spec, coords, relu(h), lookup)


def sample_skeletal(grid: VoxelGrid, x_local: np.ndarray) -> Tensor:
    """Trilinear read of every view's grid at body-local points, (Q, C, d_vox); zero outside"""
    x_local = np.asarray(x_local, dtype=np.float64).reshape(-1, 3)
    n_views, n_cells, d = grid.features.shape
    g = grid.spec.continuous(x_local)
    inside = grid.spec.bbox.contains(x_local)
    base = np.floor(g).astype(np.int64)
    frac = g - base
    dims = np.asarray(grid.spec.dims)
    rows = np.empty((x_local.shape[0], 8), dtype=np.int64)
    weights = np.empty((x_local.shape[0], 8))
    for j, corner in enumerate(CORNERS):
        idx = base + corner
        in_range = np.all((idx >= 0) & (idx < dims), axis=1)
        clipped = np.clip(idx, 0, dims - 1)
        row = grid.lookup[clipped[:, 0], clipped[:, 1], clipped[:, 2]]
        rows[:, j] = np.where(in_range & (row >= 0), row, n_cells)
        weights[:, j] = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1) * inside
    zero_rows = Tensor(np.zeros((n_views, 1, d), dtype=grid.features.dtype))
    padded = reshape(concat([grid.features, zero_rows], axis=1), (n_views * (n_cells + 1), d))
    index = rows[:, None, :] + (np.arange(n_views) * (n_cells + 1))[None, :, None]
    gathered = reshape(take_rows(padded, index), (x_local.shape[0] * n_views, 8, d))
    per_view = np.repeat(weights[:, None, :], n_views, axis=1).reshape(-1, 8)
    return reshape(weighted_sum(per_view, gathered), (x_local.shape[0], n_views, d))


def query_pixels(cameras: Sequence[Camera], x_world: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Projected pixels (Q, C, 2) and in-front flags (Q, C) of world points in every view"""
    x_world = np.asarray(x_world, dtype=np.float64).reshape(-1, 3)
    pixels = np.zeros((x_world.shape[0], len(cameras), 2))
    in_front = np.zeros((x_world.shape[0], len(cameras)), dtype=bool)
    for ci, cam in enumerate(cameras):
        uv, depth = project_points(cam, x_world)
        pixels[:, ci] = uv
        in_front[:, ci] = depth > 1e-9
    return pixels, in_front


def sample_query_pixel_features(cameras: Sequence[Camera], feature_maps: Sequence[FeatureMap],
                                x_world: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """Pixel-aligned features (Q, C, d) of world points in the frame-t maps, and validity (Q, C)"""
    pixels, in_front = query_pixels(cameras, x_world)
    n_points, n_views = in_front.shape
    map_index = np.broadcast_to(np.arange(n_views), (n_points, n_views))
    features, valid = sample_pixel_aligned_batch(feature_maps, map_index.reshape(-1), pixels.reshape(-1, 2),
                                                 mask=in_front.reshape(-1))
    return reshape(features, (n_points, n_views, feature_maps[0].channels)), valid.reshape(n_points, n_views)


def view_average(valid: np.ndarray) -> np.ndarray:
    """Uniform weights over the valid views of each query; all-zero when none is valid"""
    valid = np.asarray(valid, dtype=np.float64)
    return valid / np.maximum(valid.sum(axis=-1, keepdims=True), 1.0)


def multiview_attention(skeletal: Tensor, pixel: Tensor, valid: np.ndarray,
                        weights: MultiViewTransformer) -> Tensor:
    """(Q, C, C) weights of each view's skeletal feature over the valid views' pixel features"""
    query_map = weights.query if weights.query is not None else weights.key
    q = query_map(skeletal)
    k = weights.key(pixel)
    logits = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(weights.d1))
    return softmax_rows(logits, mask=np.asarray(valid, dtype=bool)[:, None, :])


def multiview_fuse(skeletal: Optional[Tensor], pixel: Optional[Tensor], valid: np.ndarray,
                   weights: MultiViewTransformer) -> Tuple[Tensor, Tensor]:
    """
    z = att v(p) + v(s') per view (Q, C, d1) and its plain view mean (Q, d1).

    Without the attention map, att is a uniform average over the valid views; without
    skeletal or pixel features the corresponding term is dropped.
    """
    valid = np.asarray(valid, dtype=bool)
    if valid.ndim != 2 or valid.shape[1] == 0:
        raise DimensionError(f"multi-view fusion needs at least one view, validity shape {valid.shape}")
    if skeletal is None and pixel is None:
        raise DimensionError("multi-view fusion needs skeletal or pixel-aligned features")
    z = None
    if pixel is not None:
        if skeletal is not None and weights.key is not None:
            att = multiview_attention(skeletal, pixel, valid, weights)
        else:
            n_points, n_views = valid.shape
            uniform = np.repeat(view_average(valid)[:, None, :], n_views, axis=1)
            att = Tensor(uniform, dtype=pixel.dtype)
        z = matmul(att, weights.value(pixel))
    if skeletal is not None:
        z = weights.value(skeletal) if z is None else z + weights.value(skeletal)
    return z, z.mean(axis=1)


def posenc_dir(d: np.ndarray, frequencies: int) -> np.ndarray:
    """[sin(2^k pi d), cos(2^k pi d)] for k < frequencies, 6 * frequencies values per direction"""
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = d.reshape(-1, 3)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > 1e-3):
        raise GeometryError("viewing direction is not unit length")
    d = d / norm
    blocks = []
    for k in range(frequencies):
        angle = (2.0 ** k) * np.pi * d
        blocks.append(np.sin(angle))
        blocks.append(np.cos(angle))
    out = np.concatenate(blocks, axis=1)
    return out[0] if single else out


class SkeletalRadianceField(Module):
    """The full model; parameters exist only for the enabled branches"""

    def __init__(self, config: Optional[FieldConfig] = None, seed: int = 0):
        config = config or FieldConfig()
        rng = make_rng(seed, FIELD_STREAM)
        self.config = config
        self.seed = seed
        d = config.d_img
        self.encoder = ImageEncoder(rng, d, tuple(config.encoder_channels))
        skeletal = config.enable_skeletal
        self.temporal = (TemporalTransformer(d, config.d_temporal, rng)
                         if skeletal and config.enable_temporal_transformer else None)
        self.diffusion = VoxelDiffusion(d, config.d_vox, rng) if skeletal else None
        self.skeletal_proj = Linear(config.d_vox, d, rng) if skeletal else None
        self.multiview = MultiViewTransformer(d, config.d_mv, rng, attention=config.enable_multiview_transformer,
                                              separate_query=config.separate_mv_query)
        self.density_head = DensityHead(config.d_mv, config.density_hidden, rng, config.zero_init_heads)
        self.color_head = ColorHead(config.d_mv + 6 * config.direction_frequencies, config.color_hidden, rng,
                                    config.zero_init_heads)

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.conv1.weight.dtype

    def prepare_frame(self, captures: CaptureSet, subject, t: int, views: Optional[Sequence[int]] = None,
                      clamp_memory: bool = True, cache: Optional[FeatureCache] = None) -> FrameState:
        """Encode the input views and build the skeletal grid for frame t"""
        capture = captures.subject(subject)
        capture.check_frame(t)
        views = tuple(captures.input_views if views is None else views)
        if not views:
            raise DimensionError("at least one input view is required")
        cache = {} if cache is None else cache
        maps = [cached_feature_map(self.encoder, capture, c, t, cache) for c in views]
        state = FrameState(
            subject=capture.name,
            t=t,
            views=views,
            cameras=[captures.cameras[c] for c in views],
            pose=capture.poses[t],
            bbox=body_bbox(capture.vertices[t], self.config.bbox_margin),
            feature_maps=maps,
        )
        if self.config.enable_skeletal:
            state.bank = build_skeletal_bank(capture, captures.cameras, views, t, self.config.memory_offsets,
                                             self.encoder, clamp=clamp_memory, cache=cache)
            state.fused = temporal_fuse(state.bank, self.temporal)
            local = capture.local_vertices(t)
            spec = GridSpec.from_vertices(local, self.config.voxel_divisions, self.config.bbox_margin)
            state.grid = diffuse_to_voxels(state.fused, local, spec, self.diffusion)
        return state

    def evaluate_points(self, state: FrameState, x_world: np.ndarray, directions: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Density (Q,) and color (Q, 3) at world points seen along unit directions"""
        x_world = np.asarray(x_world, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if self.config.enable_pixel_aligned:
            pixel, valid = sample_query_pixel_features(state.cameras, state.feature_maps, x_world)
        else:
            pixel = None
            uv, in_front = query_pixels(state.cameras, x_world)
            fm = state.feature_maps[0]
            valid = in_front & ((uv[..., 0] >= -0.5) & (uv[..., 0] <= fm.source_width - 0.5)
                                & (uv[..., 1] >= -0.5) & (uv[..., 1] <= fm.source_height - 0.5))
        skeletal = None
        if self.config.enable_skeletal:
            local = world_to_body(state.pose, x_world)
            skeletal = self.skeletal_proj(sample_skeletal(state.grid, local))
        z, z_mean = multiview_fuse(skeletal, pixel, valid, self.multiview)
        sigma = self.density_head(z_mean)
        color_weights = view_average(valid)
        # queries seen by no view fall back to the plain mean
        color_weights[color_weights.sum(axis=1) == 0] = 1.0 / valid.shape[1]
        z_color = weighted_sum(color_weights, z)
        gamma = Tensor(posenc_dir(directions, self.config.direction_frequencies), dtype=z.dtype)
        rgb = self.color_head(concat([z_color, gamma], axis=1))
        return sigma, rgb

    def evaluate_point(self, state: FrameState, x_world, direction) -> Tuple[float, np.ndarray]:
        sigma, rgb = self.evaluate_points(state, np.asarray(x_world)[None, :], np.asarray(direction)[None, :])
        return float(sigma.data[0]), rgb.data[0].copy()
