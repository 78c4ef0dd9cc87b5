"""
Dense n-dimensional tensors with reverse-mode automatic differentiation.

Every op is a `Function` node holding its inputs and a backward rule. The graph is
rebuilt on each forward pass; `backward(loss)` traces the nodes reachable from the loss
into a `Tape` in topological order and visits them once, in reverse.

Broadcasting is limited to leading batch axes: the smaller operand of an elementwise op
must be a scalar or match the trailing extents of the larger one.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .errors import DimensionError, SkeletalRadianceError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_default_dtype = np.dtype(np.float32)
_grad_state = threading.local()


def get_default_dtype() -> np.dtype:
    """Precision used for new tensors"""
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the precision used for new tensors (float32 or float64)"""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise DimensionError(f"unsupported precision {dtype}, expected float32 or float64")
    _default_dtype = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision of new tensors (process wide)"""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, stream)"""
    mask = (1 << 64) - 1
    return np.random.Generator(np.random.Philox(key=((stream & mask) << 64) | (seed & mask)))


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops in this thread without recording backward nodes"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Function:
    """One recorded op node: its inputs, a forward rule and a backward rule"""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward rule")

    def backward(self, grad: np.ndarray):
        """Map dL/d(output) to a tuple of dL/d(input), None for non-differentiable inputs"""
        raise NotImplementedError(f"{type(self).__name__} has no backward rule")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor._wrap(out, requires_grad=track, creator=fn if track else None)


class Tensor:
    """
    An n-d array that can take part in gradient recording.

    Leaves created with requires_grad=True are parameters; their `grad` accumulates
    additively across backward passes until `zero_grad` is called.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._creator: Optional[Function] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, creator: Optional[Function]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.requires_grad = requires_grad
        out.grad = None
        out._creator = creator
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False, creator=None)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic

    def __add__(self, other) -> "Tensor":
        if _is_scalar(other):
            return Affine.apply(self, scale=1.0, shift=float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        if _is_scalar(other):
            return Affine.apply(self, scale=1.0, shift=-float(other))
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        if _is_scalar(other):
            return Affine.apply(self, scale=-1.0, shift=float(other))
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if not _is_scalar(other):
            raise DimensionError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return GetItem.apply(self, idx=idx)

    # Shape and reductions

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating))


def as_tensor(value) -> Tensor:
    """Wrap arrays and numbers as constant tensors, pass tensors through"""
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_broadcast(a_shape, b_shape, op: str) -> None:
    if a_shape == b_shape or len(a_shape) == 0 or len(b_shape) == 0:
        return
    small, large = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) < len(large) and large[len(large) - len(small):] == small:
        return
    raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} differ beyond leading batch axes")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


# Elementwise ops

class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, "add")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, "sub")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Affine(Function):
    """y = scale * x + shift with Python-scalar coefficients"""

    def forward(self, a, scale=1.0, shift=0.0):
        self.scale = scale
        out = a * scale if scale != 1.0 else a.copy()
        return out + shift if shift != 0.0 else out

    def backward(self, grad):
        return grad * self.scale if self.scale != 1.0 else grad


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros_like(a))

    def backward(self, grad):
        # subgradient 0 at the kink
        return np.where(self.mask, grad, np.zeros_like(grad))


class Sigmoid(Function):
    def forward(self, a):
        self.out = special.expit(a)
        return self.out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(np.zeros_like(a), a)

    def backward(self, grad):
        return grad * special.expit(self.a)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return grad * self.out


# Linear algebra

class MatMul(Function):
    """C[..., i, j] = sum_l A[..., i, l] B[..., l, j]; B may be a shared 2-d matrix"""

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
        if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
            raise DimensionError(f"matmul batch axes differ: {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return grad_a, grad_b


class SoftmaxRows(Function):
    """Softmax over the last axis; masked entries act as -inf logits"""

    def forward(self, a, mask=None):
        if a.shape[-1] < 1:
            raise DimensionError(f"softmax over an empty axis, shape {a.shape}")
        if mask is None:
            shifted = a - a.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            self.out = e / e.sum(axis=-1, keepdims=True)
            return self.out
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        row_max = np.where(mask, a, -np.inf).max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, np.zeros_like(row_max))
        e = np.where(mask, np.exp(np.where(mask, a - row_max, np.zeros_like(a))), np.zeros_like(a))
        denom = e.sum(axis=-1, keepdims=True)
        safe = np.where(denom > 0, denom, np.ones_like(denom))
        # fully masked rows come out as zeros
        self.out = np.where(denom > 0, e / safe, np.zeros_like(e))
        return self.out

    def backward(self, grad):
        out = self.out
        return out * (grad - (grad * out).sum(axis=-1, keepdims=True))


# Reductions and shape ops

class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad, self.in_shape).copy()


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad / self.count, self.in_shape).copy()


class Reshape(Function):
    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(self, grad):
        return grad.reshape(self.in_shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(self.axes) != list(range(a.ndim)):
            raise DimensionError(f"invalid transpose axes {self.axes} for shape {a.shape}")
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class Concat(Function):
    def forward(self, *arrays, axis=0):
        first = arrays[0]
        axis = axis % first.ndim
        for arr in arrays[1:]:
            if arr.ndim != first.ndim or any(
                arr.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
            ):
                shapes = ", ".join(str(x.shape) for x in arrays)
                raise DimensionError(f"concat along axis {axis} needs matching extents, got {shapes}")
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class GetItem(Function):
    def forward(self, a, idx=None):
        self.in_shape = a.shape
        self.idx = idx
        return a[idx]

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(full, self.idx, grad)
        return full


class IndexAdd(Function):
    """out[index[i]] += a[i] for an output with `size` rows"""

    def forward(self, a, index=None, size=0):
        index = np.asarray(index)
        if index.shape != (a.shape[0],):
            raise DimensionError(f"index of shape {index.shape} does not match rows of {a.shape}")
        self.index = index
        out = np.zeros((size,) + a.shape[1:], dtype=a.dtype)
        np.add.at(out, index, a)
        return out

    def backward(self, grad):
        return grad[self.index]


class Cumsum(Function):
    """Running sum over the last axis; exclusive sums start at zero"""

    def forward(self, a, exclusive=False):
        self.exclusive = exclusive
        out = np.cumsum(a, axis=-1)
        if exclusive:
            out = np.concatenate([np.zeros_like(a[..., :1]), out[..., :-1]], axis=-1)
        return out

    def backward(self, grad):
        rev = np.flip(np.cumsum(np.flip(grad, axis=-1), axis=-1), axis=-1)
        if self.exclusive:
            rev = np.concatenate([rev[..., 1:], np.zeros_like(rev[..., :1])], axis=-1)
        return rev


# Functional API

def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(x, factor: float) -> Tensor:
    return Affine.apply(as_tensor(x), scale=float(factor), shift=0.0)


def matmul(a, b) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def relu(x) -> Tensor:
    return ReLU.apply(as_tensor(x))


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(as_tensor(x))


def softplus(x) -> Tensor:
    return Softplus.apply(as_tensor(x))


def exp(x) -> Tensor:
    return Exp.apply(as_tensor(x))


def softmax_rows(x, mask: Optional[np.ndarray] = None) -> Tensor:
    return SoftmaxRows.apply(as_tensor(x), mask=mask)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(as_tensor(x), shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return Transpose.apply(as_tensor(x), axes=axes)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    return Concat.apply(*tensors, axis=axis)


def take_rows(x, index: np.ndarray) -> Tensor:
    """Gather rows along the first axis; index may have any shape"""
    return GetItem.apply(as_tensor(x), idx=np.asarray(index))


def index_add(x, index: np.ndarray, size: int) -> Tensor:
    return IndexAdd.apply(as_tensor(x), index=index, size=size)


def cumsum(x, exclusive: bool = False) -> Tensor:
    return Cumsum.apply(as_tensor(x), exclusive=exclusive)


def weighted_sum(weights: np.ndarray, values: Tensor) -> Tensor:
    """out[n] = sum_k weights[n, k] * values[n, k, ...] with constant weights"""
    n, k = weights.shape
    rest = values.shape[2:]
    w = Tensor(np.asarray(weights, dtype=values.dtype).reshape(n, 1, k))
    flat = reshape(values, (n, k, int(np.prod(rest)) if rest else 1))
    return reshape(matmul(w, flat), (n,) + tuple(rest))


class Tape:
    """Tensors reachable from one output, ordered so every node follows its inputs"""

    def __init__(self, output: Tensor, order: List[Tensor]):
        self.output = output
        self.order = order

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node._creator is not None:
                for parent in node._creator.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(output, order)

    def __len__(self) -> int:
        return len(self.order)

    def run(self, seed: np.ndarray) -> None:
        grads = {id(self.output): seed}
        for node in reversed(self.order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            fn = node._creator
            if fn is None:
                node._accumulate(grad)
                continue
            input_grads = fn.backward(grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for parent, parent_grad in zip(fn.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the grad of every reachable leaf parameter"""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise SkeletalRadianceError("loss is not connected to any parameter")
    tape = Tape.trace(loss)
    logger.debug("backward over %d recorded tensors", len(tape))
    tape.run(np.ones_like(loss.data))
