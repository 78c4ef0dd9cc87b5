"""
Convolutional image encoder and bilinear pixel-aligned feature sampling
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, concat, relu, reshape, take_rows, weighted_sum

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class FeatureMap:
    """Features of one source image at half resolution, (H/2, W/2, d)"""

    features: Tensor
    camera: int
    t: int
    source_width: int
    source_height: int

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def channels(self) -> int:
        return self.features.shape[2]


class ImageEncoder(Module):
    """Three 3x3 conv stages with relu: stride 2, then two stride-1 layers"""

    def __init__(self, rng: np.random.Generator, d_img: int = 32, channels: Tuple[int, int] = (16, 32)):
        self.conv1 = Conv2d(3, channels[0], stride=2, rng=rng)
        self.conv2 = Conv2d(channels[0], channels[1], stride=1, rng=rng)
        self.conv3 = Conv2d(channels[1], d_img, stride=1, rng=rng)
        self.d_img = d_img

    def __call__(self, image) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(image, dtype=self.conv1.weight.dtype)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionError(f"encoder expects an H x W x 3 image, got {image.shape}")
        height, width, _ = image.shape
        if height % 2 or width % 2:
            raise DimensionError(f"image size must be even, got {width}x{height}")
        x = relu(self.conv1(image))
        x = relu(self.conv2(x))
        return relu(self.conv3(x))

    def encode(self, image, camera: int = 0, t: int = 0) -> FeatureMap:
        height, width = np.shape(image.data if isinstance(image, Tensor) else image)[:2]
        return FeatureMap(self(image), camera, t, width, height)


def bilinear_taps(pixels: np.ndarray, map_width: int, map_height: int, source_width: int,
                  source_height: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Flat feature indices (N, 4), weights (N, 4) and validity (N,) for source-image pixels.

    The sample point in feature-map coordinates is p / 2, clamped to the outermost sites.
    Pixels outside the source image get zero weights.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    with np.errstate(invalid="ignore"):
        valid = ((u >= -0.5) & (u <= source_width - 0.5) & (v >= -0.5) & (v <= source_height - 0.5))
    qx = np.clip(np.where(valid, u, 0.0) / 2.0, 0.0, map_width - 1)
    qy = np.clip(np.where(valid, v, 0.0) / 2.0, 0.0, map_height - 1)
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    x1 = np.minimum(x0 + 1, map_width - 1)
    y1 = np.minimum(y0 + 1, map_height - 1)
    fx = qx - x0
    fy = qy - y0
    index = np.stack([y0 * map_width + x0, y0 * map_width + x1,
                      y1 * map_width + x0, y1 * map_width + x1], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    weights = weights * valid[:, None]
    return index, weights, valid


def sample_pixel_aligned_batch(maps: Sequence[FeatureMap], map_index: np.ndarray,
                               pixels: np.ndarray, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Bilinear samples from several same-sized feature maps at once.

    map_index[n] selects the map for pixels[n]. Returns (N, d) features and the validity
    of each sample; invalid samples are zero. Not differentiable w.r.t. the pixels.
    """
    first = maps[0]
    size = first.height * first.width
    index, weights, valid = bilinear_taps(pixels, first.width, first.height,
                                          first.source_width, first.source_height)
    if mask is not None:
        valid = valid & mask
        weights = weights * mask[:, None]
    index = index + np.asarray(map_index, dtype=np.int64).reshape(-1, 1) * size
    if len(maps) == 1:
        flat = reshape(first.features, (size, first.channels))
    else:
        flat = concat([reshape(fm.features, (size, fm.channels)) for fm in maps], axis=0)
    return weighted_sum(weights, take_rows(flat, index)), valid


def sample_pixel_aligned(fm: FeatureMap, p: Sequence[float]) -> Tensor:
    """d_img feature at pixel p of the source image; zeros outside the image"""
    features, _ = sample_pixel_aligned_batch([fm], np.zeros(1, dtype=np.int64), np.asarray(p)[None, :])
    return reshape(features, (fm.channels,))
