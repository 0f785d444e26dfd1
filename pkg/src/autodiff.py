"""
Minimal reverse-mode automatic differentiation on numpy float64 arrays.
Every op records its inputs and a backward rule; `backward(loss)` walks the
recorded graph in reverse topological order and accumulates gradients into
leaf tensors. Also holds the Adam optimizer and the RUNT1 parameter container.
"""

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import config as cfg
from .config import atomic_write
from .errors import CheckpointError, GraphError, NonFiniteError, ShapeMismatchError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
CHECKPOINT_MAGIC = b"RUNT1"

ArrayLike = Union["Tensor", np.ndarray, float, int]
_grad_mode = threading.local()


def grad_enabled() -> bool:
    """Whether ops record the graph in the calling thread"""
    return getattr(_grad_mode, "enabled", True)


# ----------------------------
# Tensor and graph
# ----------------------------
@dataclass
class Node:
    """One recorded operation of the computation graph"""
    op: str
    inputs: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """n-dimensional float64 array with optional gradient accumulation"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.retain_grad = False
        self.node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the calling thread (evaluation)"""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {where}")


def _record(data: np.ndarray, inputs: Sequence[Tensor], rule, op: str) -> Tensor:
    _check_finite(data, op)
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out.node = Node(op, tuple(inputs), rule)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dt into .grad of every reachable leaf (and retain_grad) tensor"""
    if loss.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any parameter with recorded graph (built under no_grad?)")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None or tensor.retain_grad:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        if tensor.node is None:
            continue
        for parent, pg in zip(tensor.node.inputs, tensor.node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {tensor.node.op}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------
# Elementwise / reduction suite
# ----------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _record(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return _record(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeMismatchError(f"{op}: axis {axis} out of range for {ndim} dimensions")
    return axis % ndim


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("concat: nothing to concatenate")
    axis = _check_axis(axis, tensors[0].ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != axis
        ):
            raise ShapeMismatchError(f"concat: {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule, "concat")


def slice_axis(a: ArrayLike, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "slice_axis")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(a.data[index], (a,), rule, "slice_axis")


def take(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Gather flat elements of `a` into an array shaped like `indices`"""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    flat = a.data.reshape(-1)

    def rule(g):
        return (np.bincount(indices.reshape(-1), weights=g.reshape(-1), minlength=flat.size).reshape(a.shape),)

    return _record(flat[indices], (a,), rule, "take")


def scatter_add(a: ArrayLike, indices: np.ndarray, size: int) -> Tensor:
    """Sum elements of `a` into a length-`size` vector at positions `indices` (overlap-add)"""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != a.shape:
        raise ShapeMismatchError(f"scatter_add: indices {indices.shape} vs values {a.shape}")
    data = np.bincount(indices.reshape(-1), weights=a.data.reshape(-1), minlength=size)
    return _record(data, (a,), lambda g: (g[indices],), "scatter_add")


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is not None:
        axis = _check_axis(axis, a.ndim, "sum")

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[_check_axis(axis, a.ndim, "mean")]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def abs(a: ArrayLike) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _record(a.data ** 2, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of negative values")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def l2_norm(a: ArrayLike) -> Tensor:
    """Euclidean norm of the vectorized argument; gradient 0 at the origin"""
    a = as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data ** 2)))

    def rule(g):
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / norm,)

    return _record(np.asarray(norm), (a,), rule, "l2_norm")


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (a,), rule, "softmax")


def leaky_relu(a: ArrayLike, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    out = np.where(positive, a.data, slope * a.data)
    return _record(out, (a,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def selu(a: ArrayLike) -> Tensor:
    """SELU; derivative at exactly 0 takes the left branch value lambda*alpha"""
    a = as_tensor(a)
    positive = a.data > 0
    negative_exp = np.exp(np.minimum(a.data, 0.0))
    out = SELU_LAMBDA * np.where(positive, a.data, SELU_ALPHA * (negative_exp - 1.0))
    slope = SELU_LAMBDA * np.where(positive, 1.0, SELU_ALPHA * negative_exp)
    return _record(out, (a,), lambda g: (g * slope,), "selu")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ----------------------------
# Convolutions
# ----------------------------
def _pair(value) -> Tuple[int, int]:
    if isinstance(value, int):
        return value, value
    return int(value[0]), int(value[1])


def _windows(padded: np.ndarray, kernel_hw, stride, out_hw) -> np.ndarray:
    """(B, C, Ho, Wo, kH, kW) strided view of kernel-sized patches"""
    view = sliding_window_view(padded, kernel_hw, axis=(2, 3))[:, :, :: stride[0], :: stride[1]]
    return view[:, :, : out_hw[0], : out_hw[1]]


def _col2im(patches: np.ndarray, out_shape, stride) -> np.ndarray:
    """Scatter-accumulate (B, Ho, Wo, C, kH, kW) patches into a (B, C, H, W) buffer"""
    _, ho, wo, _, kh, kw = patches.shape
    out = np.zeros(out_shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride[0] * ho:stride[0], j:j + stride[1] * wo:stride[1]] += (
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def conv2d(input: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of (B, C_in, H, W) with (C_out, C_in, kH, kW) plus per-channel bias"""
    x, k, b = as_tensor(input), as_tensor(kernel), as_tensor(bias)
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeMismatchError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {k.shape}")
    batch, c_in, h, w = x.shape
    c_out, k_in, kh, kw = k.shape
    if k_in != c_in or b.shape != (c_out,):
        raise ShapeMismatchError(f"conv2d: input {x.shape}, kernel {k.shape}, bias {b.shape} do not agree")
    if kh > h + 2 * padding[0] or kw > w + 2 * padding[1]:
        raise ShapeMismatchError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, w)} + {padding}")
    ho = conv_output_size(h, kh, stride[0], padding[0])
    wo = conv_output_size(w, kw, stride[1], padding[1])

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding[0], padding[0]), (padding[1], padding[1])))
    patches = _windows(padded, (kh, kw), stride, (ho, wo))
    out = np.tensordot(patches, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b.data[None, :, None, None]

    def rule(g):
        gx = gk = gb = None
        if x.requires_grad:
            dpatches = np.tensordot(g, k.data, axes=([1], [0]))
            gx = _col2im(dpatches, padded.shape, stride)[:, :, padding[0]:padding[0] + h, padding[1]:padding[1] + w]
        if k.requires_grad:
            gk = np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3]))
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _record(out, (x, k, b), rule, "conv2d")


def conv_transpose2d(
    input: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1), padding=(0, 0), output_padding=(0, 0)
) -> Tensor:
    """Transposed convolution, kernel laid out (C_in, C_out, kH, kW)"""
    x, k, b = as_tensor(input), as_tensor(kernel), as_tensor(bias)
    stride, padding, output_padding = _pair(stride), _pair(padding), _pair(output_padding)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeMismatchError(f"conv_transpose2d: expected 4-D input and kernel, got {x.shape} and {k.shape}")
    batch, c_in, h, w = x.shape
    k_in, c_out, kh, kw = k.shape
    if k_in != c_in or b.shape != (c_out,):
        raise ShapeMismatchError(
            f"conv_transpose2d: input {x.shape}, kernel {k.shape}, bias {b.shape} do not agree"
        )
    if not (0 <= output_padding[0] < stride[0] and 0 <= output_padding[1] < stride[1]):
        raise ShapeMismatchError(f"conv_transpose2d: output_padding {output_padding} must be < stride {stride}")
    ho = conv_transpose_output_size(h, kh, stride[0], padding[0], output_padding[0])
    wo = conv_transpose_output_size(w, kw, stride[1], padding[1], output_padding[1])
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"conv_transpose2d: output size {(ho, wo)} is empty")

    full = (batch, c_out, (h - 1) * stride[0] + kh + output_padding[0], (w - 1) * stride[1] + kw + output_padding[1])
    contrib = np.tensordot(x.data, k.data, axes=([1], [0]))
    crop = (slice(None), slice(None), slice(padding[0], padding[0] + ho), slice(padding[1], padding[1] + wo))
    out = _col2im(contrib, full, stride)[crop] + b.data[None, :, None, None]

    def rule(g):
        gx = gk = gb = None
        gfull = np.zeros(full)
        gfull[crop] = g
        dcontrib = _windows(gfull, (kh, kw), stride, (h, w))
        if x.requires_grad:
            gx = np.tensordot(dcontrib, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if k.requires_grad:
            gk = np.tensordot(x.data, dcontrib, axes=([0, 2, 3], [0, 2, 3]))
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return _record(np.ascontiguousarray(out), (x, k, b), rule, "conv_transpose2d")


# ----------------------------
# Batch normalization
# ----------------------------
@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm2d(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = cfg.BN_MOMENTUM,
    eps: float = cfg.BN_EPS,
) -> Tensor:
    """Per-channel normalization over (B, H, W); train mode updates running stats"""
    x, gamma, beta = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatchError(f"batch_norm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        if count < 2:
            raise ShapeMismatchError("batch_norm2d: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1 - momentum) * state.running_var + momentum * var * count / (count - 1)
    else:
        mu, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def rule(g):
        gx = None
        dxhat = g * gamma.data[None, :, None, None]
        if x.requires_grad:
            if training:
                sum_dxhat = dxhat.sum(axis=axes)[None, :, None, None]
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = inv_std[None, :, None, None] / count * (count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gamma, beta), rule, "batch_norm2d")


# ----------------------------
# Adam
# ----------------------------
@dataclass
class AdamState:
    lr: float = cfg.LEARNING_RATE
    beta1: float = cfg.ADAM_BETA1
    beta2: float = cfg.ADAM_BETA2
    eps: float = cfg.ADAM_EPS
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update of `params` in place; missing grads count as zero"""
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if g.shape != param.shape:
            raise ShapeMismatchError(f"adam_step: gradient {g.shape} does not match parameter {name} {param.shape}")
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        param.data = param.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        _check_finite(param.data, f"adam update of {name}")
    return state


class Adam:
    """Optimizer wrapper holding the parameter set and its AdamState"""

    def __init__(self, params: Dict[str, Tensor], lr: float = cfg.LEARNING_RATE):
        self.params = params
        self.state = AdamState(lr=lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


# ----------------------------
# Parameter container (RUNT1)
# ----------------------------
def encode_tensors(arrays: Dict[str, np.ndarray]) -> bytes:
    """magic, record count, then per record: name length, UTF-8 name, rank, extents, float64 payload"""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<Q", len(arrays))]
    for name, array in arrays.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad magic: not a RUNT1 container")
    offset = len(CHECKPOINT_MAGIC)

    def read(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError("truncated container")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    (count,) = read("<Q")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<Q")
        if offset + name_len > len(blob):
            raise CheckpointError("truncated container")
        try:
            name = blob[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"record name is not UTF-8: {e}") from e
        offset += name_len
        (rank,) = read("<Q")
        if 8 * rank > len(blob) - offset:
            raise CheckpointError(f"rank {rank} of {name} exceeds the container size")
        shape = read(f"<{rank}Q") if rank else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after {count} records")
    return arrays


def save_tensors(path, arrays: Dict[str, np.ndarray]) -> None:
    atomic_write(path, encode_tensors(arrays))


def load_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode_tensors(f.read())
