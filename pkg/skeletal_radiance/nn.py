"""
Parameter containers built on the tensor engine: Module, Linear, Conv2d, SparseConv3d, Adam
"""

import logging
from itertools import product
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from .errors import CheckpointError, DimensionError
from .tensor import Tensor, concat, get_default_dtype, matmul, reshape, take_rows

logger = logging.getLogger(__name__)

NEIGHBOR_OFFSETS_3D = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Module:
    """Base class; parameters are discovered from attributes in definition order"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Convert every parameter in place, e.g. to float64 for gradient checks"""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError("checkpoint does not match the model architecture", missing, extra)
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {value.shape}, model expects {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
            p.grad = None


class Linear(Module):
    """y = x W + b over the last axis; W is stored (in, out)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 zero_init: bool = False):
        shape = (in_features, out_features)
        if zero_init:
            weight = np.zeros(shape, dtype=get_default_dtype())
        else:
            weight = uniform_init(rng, in_features, shape)
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros(out_features, dtype=get_default_dtype()))
        self.in_features = in_features
        self.out_features = out_features

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear layer expects {self.in_features} features, got shape {x.shape}")
        if x.ndim == 1:
            return reshape(matmul(reshape(x, (1, -1)), self.weight), (self.out_features,)) + self.bias
        return matmul(x, self.weight) + self.bias


class Conv2d(Module):
    """3x3 convolution on an H x W x C_in tensor with edge-replicate padding of one pixel"""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng: np.random.Generator):
        fan_in = 9 * in_channels
        self.weight = parameter(uniform_init(rng, fan_in, (fan_in, out_channels)))
        self.bias = parameter(np.zeros(out_channels, dtype=get_default_dtype()))
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self._index_cache: Dict[Tuple[int, int], np.ndarray] = {}

    def _patch_index(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._index_cache:
            out_h = (height - 1) // self.stride + 1
            out_w = (width - 1) // self.stride + 1
            oy, ox = np.meshgrid(np.arange(out_h) * self.stride, np.arange(out_w) * self.stride, indexing="ij")
            dy, dx = np.meshgrid(np.arange(-1, 2), np.arange(-1, 2), indexing="ij")
            rows = np.clip(oy.reshape(-1, 1) + dy.reshape(1, -1), 0, height - 1)
            cols = np.clip(ox.reshape(-1, 1) + dx.reshape(1, -1), 0, width - 1)
            self._index_cache[key] = rows * width + cols
        return self._index_cache[key]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise DimensionError(f"conv expects H x W x {self.in_channels}, got {x.shape}")
        height, width, _ = x.shape
        index = self._patch_index(height, width)
        out_h = (height - 1) // self.stride + 1
        out_w = (width - 1) // self.stride + 1
        patches = take_rows(reshape(x, (height * width, self.in_channels)), index)
        cols = reshape(patches, (index.shape[0], 9 * self.in_channels))
        out = matmul(cols, self.weight) + self.bias
        return reshape(out, (out_h, out_w, self.out_channels))


def dilate_cells(coords: np.ndarray, dims: Tuple[int, int, int]) -> np.ndarray:
    """Cells within one step (26-neighbourhood) of any active cell, sorted by linear index"""
    dims_arr = np.asarray(dims)
    cand = (coords[:, None, :] + NEIGHBOR_OFFSETS_3D[None, :, :]).reshape(-1, 3)
    inside = np.all((cand >= 0) & (cand < dims_arr), axis=1)
    linear = np.unique(np.ravel_multi_index(cand[inside].T, dims))
    return np.stack(np.unravel_index(linear, dims), axis=1).astype(np.int64)


class SparseConv3d(Module):
    """
    3x3x3 stride-1 convolution over the active cells of a dense index volume.

    Output lives on the active set dilated by one cell; inactive neighbours read zeros.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        fan_in = 27 * in_channels
        self.weight = parameter(uniform_init(rng, fan_in, (fan_in, out_channels)))
        self.bias = parameter(np.zeros(out_channels, dtype=get_default_dtype()))
        self.in_channels = in_channels
        self.out_channels = out_channels

    def __call__(self, features: Tensor, coords: np.ndarray,
                 dims: Tuple[int, int, int]) -> Tuple[Tensor, np.ndarray]:
        """features (N, C_in) or a batch (B, N, C_in) sharing the same active cells"""
        batched = features.ndim == 3
        if not batched:
            features = reshape(features, (1,) + features.shape)
        batch, n_active = features.shape[0], coords.shape[0]
        if features.shape[1:] != (n_active, self.in_channels):
            raise DimensionError(
                f"sparse conv expects {n_active} x {self.in_channels} features, got {features.shape}"
            )
        lookup = np.full(dims, n_active, dtype=np.int64)
        lookup[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(n_active)
        out_coords = dilate_cells(coords, dims)
        neigh = out_coords[:, None, :] + NEIGHBOR_OFFSETS_3D[None, :, :]
        inside = np.all((neigh >= 0) & (neigh < np.asarray(dims)), axis=2)
        clipped = np.clip(neigh, 0, np.asarray(dims) - 1)
        index = lookup[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
        index = np.where(inside, index, n_active)
        index = index[None] + (np.arange(batch) * (n_active + 1))[:, None, None]
        zero_rows = Tensor(np.zeros((batch, 1, self.in_channels), dtype=features.dtype))
        padded = reshape(concat([features, zero_rows], axis=1), (batch * (n_active + 1), self.in_channels))
        gathered = reshape(take_rows(padded, index), (batch, out_coords.shape[0], 27 * self.in_channels))
        out = matmul(gathered, self.weight) + self.bias
        if not batched:
            out = reshape(out, out.shape[1:])
        return out, out_coords


class Adam:
    """Adam over a dict of named parameters; parameters without grad are skipped"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 5e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
            self.m[name], self.v[name] = m, v
            update = (self.lr / correction1) * m / (np.sqrt(v / correction2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def grad_norm(self) -> Optional[float]:
        grads = [p.grad for p in self.params.values() if p.grad is not None]
        if not grads:
            return None
        return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
