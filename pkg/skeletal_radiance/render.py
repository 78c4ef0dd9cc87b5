"""
Ray sampling, quadrature compositing and full-image rendering

Colors are composited front to back onto a black background. Rays that miss the body
box are never sent to the field.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from tqdm import tqdm

from .errors import RenderError
from .geometry import Camera, Ray, generate_rays, pixel_grid, ray_box_bounds_batch
from .log import progress_disabled
from .tensor import Tensor, cumsum, exp, matmul, mul, no_grad, reshape, scale

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 64


@dataclass(eq=False)
class RaySamples:
    """Sample depths (R, n) and their intervals (R, n) for a batch of rays"""

    near: np.ndarray
    far: np.ndarray
    depths: np.ndarray
    deltas: np.ndarray

    @property
    def count(self) -> int:
        return self.depths.shape[1]

    def points(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """World positions (R, n, 3)"""
        origins = np.broadcast_to(origins, directions.shape)
        return origins[:, None, :] + self.depths[..., None] * directions[:, None, :]


@dataclass(eq=False)
class CompositeResult:
    rgb: Tensor
    opacity: Tensor
    weights: Tensor
    transmittance: np.ndarray


def sample_depths(near, far, n: int = DEFAULT_SAMPLES, rng: Optional[np.random.Generator] = None) -> RaySamples:
    """
    One depth per equal bin of [near, far]: the bin center in eval mode (rng None),
    uniformly jittered within the bin when an rng is given.

    Intervals are z[i+1] - z[i]; the last one is (far - near) / n.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if n < 1:
        raise RenderError(f"need at least one sample per ray, got {n}")
    if near.shape != far.shape:
        raise RenderError(f"near {near.shape} and far {far.shape} bounds differ in shape")
    if np.any(~np.isfinite(near)) or np.any(~np.isfinite(far)) or np.any(near >= far):
        bad = np.flatnonzero(~(near < far))
        i = bad[0] if bad.size else 0
        raise RenderError(f"invalid ray bounds: near {near[i]} must be below far {far[i]}")
    width = (far - near) / n
    starts = near[:, None] + width[:, None] * np.arange(n)[None, :]
    if rng is None:
        depths = starts + 0.5 * width[:, None]
    else:
        depths = starts + rng.random((near.shape[0], n)) * width[:, None]
    deltas = np.empty_like(depths)
    deltas[:, :-1] = np.diff(depths, axis=1)
    deltas[:, -1] = width
    return RaySamples(near, far, depths, deltas)


def sample_points(ray: Ray, n: int = DEFAULT_SAMPLES, rng: Optional[np.random.Generator] = None) -> RaySamples:
    """Samples along a single ray with bounds set"""
    if ray.near is None or ray.far is None:
        raise RenderError("ray bounds are not set")
    return sample_depths(ray.near, ray.far, n, rng)


def composite(sigma, colors, deltas) -> CompositeResult:
    """
    Front-to-back quadrature: alpha_i = 1 - exp(-sigma_i delta_i),
    T_i = prod_{j<i} (1 - alpha_j), w_i = T_i alpha_i, rgb = sum w_i c_i.

    sigma (R, n) or (n,), colors (..., n, 3), deltas like sigma. Differentiable in sigma
    and colors.
    """
    if not isinstance(sigma, Tensor):
        sigma = Tensor(sigma)
    if not isinstance(colors, Tensor):
        colors = Tensor(colors, dtype=sigma.dtype)
    single = sigma.ndim == 1
    if single:
        sigma = reshape(sigma, (1,) + sigma.shape)
        colors = reshape(colors, (1,) + colors.shape)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(sigma.shape)
    if colors.shape != sigma.shape + (3,):
        raise RenderError(f"colors {colors.shape} do not match densities {sigma.shape}")
    if np.any(sigma.data < 0):
        raise RenderError(f"negative density {float(sigma.data.min())}")
    if np.any(deltas < 0):
        raise RenderError(f"negative sample interval {float(deltas.min())}")
    optical = mul(sigma, Tensor(deltas, dtype=sigma.dtype))
    transmittance = exp(scale(cumsum(optical, exclusive=True), -1.0))
    alpha = 1.0 - exp(scale(optical, -1.0))
    weights = mul(transmittance, alpha)
    rows, n = sigma.shape
    rgb = reshape(matmul(reshape(weights, (rows, 1, n)), colors), (rows, 3))
    opacity = weights.sum(axis=1)
    if single:
        rgb = reshape(rgb, (3,))
        opacity = reshape(opacity, ())
        weights = reshape(weights, (n,))
        return CompositeResult(rgb, opacity, weights, transmittance.data[0].copy())
    return CompositeResult(rgb, opacity, weights, transmittance.data.copy())


def render_rays(model, state, origins: np.ndarray, directions: np.ndarray, near: np.ndarray,
                far: np.ndarray, samples: int = DEFAULT_SAMPLES,
                rng: Optional[np.random.Generator] = None) -> CompositeResult:
    """Sample, evaluate and composite rays that hit the body box"""
    directions = np.atleast_2d(directions)
    origins = np.broadcast_to(origins, directions.shape)
    ray_samples = sample_depths(near, far, samples, rng)
    points = ray_samples.points(origins, directions)
    rows = directions.shape[0]
    view = np.repeat(directions, samples, axis=0)
    sigma, rgb = model.evaluate_points(state, points.reshape(-1, 3), view)
    return composite(reshape(sigma, (rows, samples)), reshape(rgb, (rows, samples, 3)), ray_samples.deltas)


def render_image(model, captures, subject, t: int, query_cam: Camera, samples: int = DEFAULT_SAMPLES,
                 threads: int = 1, tile_size: int = 256, state=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render the (H, W, 3) image and (H, W) alpha map of a subject at frame t.

    model needs prepare_frame(captures, subject, t) returning a state with a bbox, and
    evaluate_points(state, x, d). Tiles of rays are rendered on a thread pool; each ray
    is computed independently of the others in its tile.
    """
    if threads < 1 or tile_size < 1:
        raise RenderError(f"threads and tile_size must be >= 1, got {threads} and {tile_size}")
    with no_grad():
        if state is None:
            state = model.prepare_frame(captures, subject, t)
        origin, directions = generate_rays(query_cam, pixel_grid(query_cam))
        near, far, hit = ray_box_bounds_batch(origin, directions, state.bbox)
    pixels = query_cam.width * query_cam.height
    image = np.zeros((pixels, 3))
    alpha = np.zeros(pixels)
    rows = np.flatnonzero(hit & (far > near))
    tiles = [rows[i:i + tile_size] for i in range(0, rows.size, tile_size)]
    logger.debug("rendering %d of %d rays in %d tiles on %d threads", rows.size, pixels, len(tiles), threads)

    def run(tile):
        with no_grad():
            result = render_rays(model, state, origin, directions[tile], near[tile], far[tile], samples)
        return tile, result.rgb.data, result.opacity.data

    bar = tqdm(total=len(tiles), desc="Rendering", disable=progress_disabled(logger) or len(tiles) < 2)
    if threads == 1:
        results = map(run, tiles)
        for tile, rgb, opacity in results:
            image[tile], alpha[tile] = rgb, opacity
            bar.update(1)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for tile, rgb, opacity in pool.map(run, tiles):
                image[tile], alpha[tile] = rgb, opacity
                bar.update(1)
    bar.close()
    shape = (query_cam.height, query_cam.width)
    return image.reshape(shape + (3,)), alpha.reshape(shape)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image: np.ndarray) -> Path:
    """8-bit RGB PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
    return path


def write_alpha(path, alpha: np.ndarray) -> Path:
    """Single-channel 8-bit PNG"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(alpha)).save(path)
    return path
