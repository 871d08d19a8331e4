"""Dense NCHW tensors with reverse-mode differentiation and the network kernels."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from .const import (
    ADAM_BETAS,
    ADAM_EPSILON,
    IGNORE_LABEL,
    LEAKY_SLOPE,
    LOGGER,
    NORM_EPSILON,
)
from .errors import PyFuNumericalError, PyFuShapeError, PyFuValueError

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Iterator, Sequence

ACTIVATION_LEAKY_RELU = "leaky_relu"
ACTIVATION_IDENTITY = "identity"
MODE_BATCH_STAT = "batch-stat"
MODE_FIXED_STAT = "fixed-stat"
NCHW_RANK = 4
GRADCHECK_STEP = 1e-6
GRADCHECK_FLOOR = 1e-6


class _EngineState(threading.local):
    """Per-thread switches of the differentiation engine."""

    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype: type[np.floating] = np.float32


_STATE = _EngineState()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


@contextlib.contextmanager
def check_mode() -> Iterator[None]:
    """Create new tensors in 64-bit precision (gradient verification only)."""
    previous = _STATE.dtype
    _STATE.dtype = np.float64
    try:
        yield
    finally:
        _STATE.dtype = previous


def default_dtype() -> type[np.floating]:
    """Return the dtype used for newly created tensors."""
    return _STATE.dtype


@dataclass(eq=False)
class Node:
    """Recorded op: its inputs and the vector-Jacobian product closure."""

    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense floating-point array participating in a differentiation graph."""

    __slots__ = ("_node", "data", "grad", "requires_grad")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        _node: Node | None = None,
    ) -> None:
        """Wrap an array; non-float input is cast to the default dtype."""
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(_STATE.dtype)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node = _node

    def __repr__(self) -> str:
        """Return a short description."""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the array shape."""
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        """Return the array dtype."""
        return self.data.dtype

    @property
    def node(self) -> Node | None:
        """Return the op that produced this tensor, None for leaves."""
        return self._node

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def item(self) -> float:
        """Return the value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        """Return a leaf tensor sharing the data."""
        return Tensor(self.data)

    def __add__(self, other: Tensor | float) -> Tensor:
        """Elementwise sum with broadcasting."""
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other: Tensor | float) -> Tensor:
        """Elementwise difference with broadcasting."""
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other: Tensor | float) -> Tensor:
        """Elementwise product with broadcasting."""
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        """Negate."""
        return scale(self, -1.0)

    def sum(self) -> Tensor:
        """Sum all elements into a scalar tensor."""
        return sum_all(self)


def _as_tensor(value: Tensor | float, dtype: np.dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _record(
    op: str,
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op result, recording a graph node when any input needs grads."""
    requires = _STATE.grad_enabled and any(tensor.requires_grad for tensor in inputs)
    node = Node(op, inputs, backward_fn) if requires else None
    return Tensor(data, requires_grad=requires, _node=node)


@dataclass
class Graph:
    """Tensors reachable from an output, children before parents."""

    tensors: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> Graph:
        """Topologically order every grad-requiring tensor feeding `output`."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                stack.extend(
                    (parent, False)
                    for parent in tensor.node.inputs
                    if parent.requires_grad and id(parent) not in visited
                )
        return cls(order)

    @property
    def ops(self) -> list[str]:
        """Return the op names in topological order."""
        return [tensor.node.op for tensor in self.tensors if tensor.node is not None]


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate `.grad` of every grad-requiring leaf reachable from a scalar loss."""
    if loss.data.size != 1:
        msg = f"backward needs a scalar loss, got shape {loss.shape}"
        raise PyFuShapeError(msg)
    if not loss.requires_grad:
        msg = "Loss does not depend on any trainable tensor"
        raise PyFuValueError(msg)
    graph = graph or Graph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(graph.tensors):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        if tensor.node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        parent_grads = tensor.node.backward(grad)
        for parent, parent_grad in zip(tensor.node.inputs, parent_grads, strict=True):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
    return graph


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b with numpy broadcasting."""

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _record("add", a.data + b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b with numpy broadcasting."""

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    factor_cast = x.dtype.type(factor)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * factor_cast,)

    return _record("scale", x.data * factor_cast, (x,), _backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar."""

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad, x.shape).astype(x.dtype),)

    return _record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along an axis (channels by default)."""
    if not tensors:
        msg = "concat needs at least one tensor"
        raise PyFuValueError(msg)
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        other = tensor.shape
        if len(other) != len(reference) or any(
            size != ref for dim, (size, ref) in enumerate(zip(other, reference, strict=True)) if dim != axis
        ):
            msg = f"concat shape mismatch: {reference} vs {other} along axis {axis}"
            raise PyFuShapeError(msg)
    splits = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def _backward(grad: np.ndarray) -> list[np.ndarray]:
        return np.split(grad, splits, axis=axis)

    data = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    return _record("concat", data, tuple(tensors), _backward)


def crop(x: Tensor, rows: tuple[int, int], columns: tuple[int, int]) -> Tensor:
    """Return the spatial window rows [r0, r1) x columns [c0, c1)."""
    _require_rank(x, "crop input")
    r0, r1 = rows
    c0, c1 = columns
    height, width = x.shape[2:]
    if not (0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width):
        msg = f"Crop rows {rows} columns {columns} is empty or outside a {height}x{width} map"
        raise PyFuValueError(msg)
    if (r0, r1, c0, c1) == (0, height, 0, width):
        return x

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=grad.dtype)
        full[:, :, r0:r1, c0:c1] = grad
        return (full,)

    return _record("crop", x.data[:, :, r0:r1, c0:c1].copy(), (x,), _backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Max-shifted softmax along the class axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (probs * (grad - (grad * probs).sum(axis=axis, keepdims=True)),)

    return _record("softmax", probs, (x,), _backward)


def _require_rank(x: Tensor, what: str) -> None:
    if x.data.ndim != NCHW_RANK:
        msg = f"{what} must be NCHW, got shape {x.shape}"
        raise PyFuShapeError(msg)


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    """Return floor((size + 2p - d(k-1) - 1) / s) + 1."""
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(
    padded: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    dilation: tuple[int, int],
    out_size: tuple[int, int],
) -> np.ndarray:
    """Return a read-only (N, C, kh, kw, oh, ow) window view of a padded input."""
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, c, kernel[0], kernel[1], out_size[0], out_size[1]),
        strides=(sn, sc, dilation[0] * sh, dilation[1] * sw, stride[0] * sh, stride[1] * sw),
        writeable=False,
    )


def _col2im(
    cols: np.ndarray,
    padded_shape: tuple[int, ...],
    stride: tuple[int, int],
    dilation: tuple[int, int],
) -> np.ndarray:
    """Scatter-add window gradients back onto the padded input."""
    _, _, kh, kw, out_h, out_w = cols.shape
    sy, sx = stride
    dy, dx = dilation
    image = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dy
        for j in range(kw):
            c0 = j * dx
            image[:, :, r0 : r0 + sy * (out_h - 1) + 1 : sy, c0 : c0 + sx * (out_w - 1) + 1 : sx] += cols[
                :, :, i, j
            ]
    return image


def conv2d(  # noqa: PLR0913
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
    dilation: tuple[int, int] = (1, 1),
    groups: int = 1,
) -> Tensor:
    """Grouped, strided, dilated 2D cross-correlation."""
    _require_rank(x, "conv2d input")
    _require_rank(weight, "conv2d weight")
    n, c, h, w = x.shape
    c_out, c_in_group, kh, kw = weight.shape
    if groups < 1 or c % groups or c_out % groups or c_in_group != c // groups:
        msg = f"conv2d weight {weight.shape} does not fit input {x.shape} with groups={groups}"
        raise PyFuShapeError(msg)
    if bias is not None and bias.shape != (c_out,):
        msg = f"conv2d bias {bias.shape} does not fit weight {weight.shape}"
        raise PyFuShapeError(msg)
    sy, sx = stride
    py, px = padding
    dy, dx = dilation
    out_h = conv_output_size(h, kh, sy, py, dy)
    out_w = conv_output_size(w, kw, sx, px, dx)
    if out_h < 1 or out_w < 1:
        msg = f"conv2d input {x.shape} too small for weight {weight.shape} with dilation {dilation}"
        raise PyFuShapeError(msg)

    padded = np.pad(x.data, ((0, 0), (0, 0), (py, py), (px, px))) if py or px else np.ascontiguousarray(x.data)
    cols = _im2col(padded, (kh, kw), stride, dilation, (out_h, out_w))
    depthwise = groups == c and c_out == c
    c_out_group = c_out // groups

    if groups == 1:
        mat = cols.reshape(n, c * kh * kw, out_h * out_w)
        wmat = weight.data.reshape(c_out, -1)
        out = np.matmul(wmat, mat).reshape(n, c_out, out_h, out_w)
    elif depthwise:
        kernel = weight.data[:, 0]
        out = np.zeros((n, c, out_h, out_w), dtype=np.result_type(x.data, weight.data))
        for i in range(kh):
            for j in range(kw):
                out += cols[:, :, i, j] * kernel[None, :, i, j, None, None]
    else:
        cols_g = cols.reshape(n, groups, c_in_group, kh, kw, out_h, out_w)
        w_g = weight.data.reshape(groups, c_out_group, c_in_group, kh, kw)
        out = np.einsum("ngcijyx,gocij->ngoyx", cols_g, w_g, optimize=True).reshape(n, c_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_x = grad_w = grad_cols = None
        if groups == 1:
            gmat = grad.reshape(n, c_out, out_h * out_w)
            if weight.requires_grad:
                grad_w = np.tensordot(gmat, mat, axes=([0, 2], [0, 2])).reshape(weight.shape)
            if x.requires_grad:
                grad_cols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, out_h, out_w)
        elif depthwise:
            if weight.requires_grad:
                grad_w = np.empty(weight.shape, dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        grad_w[:, 0, i, j] = (grad * cols[:, :, i, j]).sum(axis=(0, 2, 3))
            if x.requires_grad:
                grad_cols = grad[:, :, None, None] * kernel[None, :, :, :, None, None]
        else:
            grad_g = grad.reshape(n, groups, c_out_group, out_h, out_w)
            if weight.requires_grad:
                grad_w = np.einsum("ngoyx,ngcijyx->gocij", grad_g, cols_g, optimize=True).reshape(weight.shape)
            if x.requires_grad:
                grad_cols = np.einsum("ngoyx,gocij->ngcijyx", grad_g, w_g, optimize=True).reshape(
                    n, c, kh, kw, out_h, out_w
                )
        if grad_cols is not None:
            grad_x = _col2im(grad_cols, padded.shape, stride, dilation)[:, :, py : py + h, px : px + w]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out.astype(x.dtype, copy=False), inputs, _backward)


def interpolation_matrix(out_size: int, in_size: int, *, align_corners: bool, dtype: np.dtype) -> np.ndarray:
    """Return the (out, in) linear interpolation matrix along one axis."""
    target = np.arange(out_size, dtype=np.float64)
    if align_corners:
        source = target * ((in_size - 1) / (out_size - 1)) if out_size > 1 else np.zeros(out_size)
    else:
        source = np.maximum((target + 0.5) * (in_size / out_size) - 0.5, 0.0)
    low = np.minimum(np.floor(source).astype(np.int64), in_size - 1)
    high = np.minimum(low + 1, in_size - 1)
    frac = source - low
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(matrix, (rows, low), 1.0 - frac)
    np.add.at(matrix, (rows, high), frac)
    return matrix.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int, *, align_corners: bool = False) -> Tensor:
    """Bilinearly resample the spatial dims to (out_h, out_w)."""
    _require_rank(x, "bilinear_resize input")
    if out_h < 1 or out_w < 1:
        msg = f"Resize target must be at least 1x1, got {out_h}x{out_w}"
        raise PyFuValueError(msg)
    height, width = x.shape[2:]
    if (out_h, out_w) == (height, width):
        return x
    ry = interpolation_matrix(out_h, height, align_corners=align_corners, dtype=x.dtype)
    rx = interpolation_matrix(out_w, width, align_corners=align_corners, dtype=x.dtype)

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (ry.T @ grad @ rx,)

    return _record("bilinear_resize", ry @ (x.data @ rx.T), (x,), _backward)


def norm_act(  # noqa: PLR0913
    x: Tensor,
    scale_param: Tensor,
    shift_param: Tensor,
    *,
    mode: str = MODE_BATCH_STAT,
    activation: str = ACTIVATION_LEAKY_RELU,
    slope: float = LEAKY_SLOPE,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    eps: float = NORM_EPSILON,
) -> Tensor:
    """Per-channel normalization, affine transform and activation."""
    _require_rank(x, "norm_act input")
    channels = x.shape[1]
    if scale_param.shape != (channels,) or shift_param.shape != (channels,):
        msg = (
            f"norm_act scale {scale_param.shape} / shift {shift_param.shape} "
            f"do not match {channels} channels"
        )
        raise PyFuShapeError(msg)
    data = x.data
    if mode == MODE_BATCH_STAT:
        mean = data.mean(axis=(0, 2, 3))
        var = data.var(axis=(0, 2, 3))
    elif mode == MODE_FIXED_STAT:
        if running_mean is None or running_var is None:
            msg = "fixed-stat normalization needs running statistics"
            raise PyFuValueError(msg)
        mean = running_mean.astype(data.dtype)
        var = running_var.astype(data.dtype)
    else:
        msg = f"Unknown normalization mode: {mode}"
        raise PyFuValueError(msg)
    if activation not in (ACTIVATION_LEAKY_RELU, ACTIVATION_IDENTITY):
        msg = f"Unknown activation: {activation}"
        raise PyFuValueError(msg)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(data.dtype)[None, :, None, None]
    xhat = (data - mean[None, :, None, None]) * inv_std
    gamma = scale_param.data[None, :, None, None]
    pre = xhat * gamma + shift_param.data[None, :, None, None]
    leaky = activation == ACTIVATION_LEAKY_RELU
    slope_cast = data.dtype.type(slope)
    out = np.where(pre > 0, pre, pre * slope_cast) if leaky else pre

    def _backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_pre = np.where(pre > 0, grad, grad * slope_cast) if leaky else grad
        grad_scale = (grad_pre * xhat).sum(axis=(0, 2, 3))
        grad_shift = grad_pre.sum(axis=(0, 2, 3))
        grad_xhat = grad_pre * gamma
        if mode == MODE_FIXED_STAT:
            return grad_xhat * inv_std, grad_scale, grad_shift
        count = data.size // channels
        grad_x = (inv_std / count) * (
            count * grad_xhat
            - grad_xhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (grad_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return grad_x, grad_scale, grad_shift

    return _record("norm_act", out, (x, scale_param, shift_param), _backward)


def weighted_ce_softmax(
    logits: Tensor,
    targets: np.ndarray,
    weights: np.ndarray,
    *,
    ignore_index: int = IGNORE_LABEL,
) -> Tensor:
    """Class-weighted mean cross-entropy over non-ignored pixels."""
    _require_rank(logits, "logits")
    n, k, h, w = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if targets.shape != (n, h, w):
        msg = f"Targets {targets.shape} do not match logits {logits.shape}"
        raise PyFuShapeError(msg)
    if weights.shape != (k,) or np.any(weights <= 0):
        msg = f"Class weights must be {k} strictly positive values, got {weights}"
        raise PyFuValueError(msg)
    valid = targets != ignore_index
    if not valid.any():
        msg = "All pixels are ignored; the loss is undefined"
        raise PyFuValueError(msg)
    labelled = targets[valid]
    if labelled.min() < 0 or labelled.max() >= k:
        msg = f"Target labels must lie in [0, {k}) or equal {ignore_index}"
        raise PyFuValueError(msg)

    data = logits.data
    shifted = data - data.max(axis=1, keepdims=True)
    log_prob = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(log_prob, safe[:, None], axis=1)[:, 0]
    pixel_weight = np.where(valid, weights[safe], 0.0).astype(data.dtype)
    total = pixel_weight.sum()
    loss = -(pixel_weight * picked).sum() / total

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        grad_logits = np.exp(log_prob)
        onehot = np.zeros_like(grad_logits)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad_logits -= onehot
        grad_logits *= (pixel_weight / total)[:, None] * grad
        return (grad_logits,)

    return _record("weighted_ce_softmax", np.asarray(loss, dtype=data.dtype), (logits,), _backward)


def bilinear_sample(features: Tensor, coords: np.ndarray, valid: np.ndarray) -> Tensor:
    """Sample (1, C, hf, wf) features at per-cell (x, y) coordinates; invalid cells are 0."""
    _require_rank(features, "sampled features")
    n, c, hf, wf = features.shape
    if n != 1:
        msg = f"bilinear_sample expects a single feature map, got batch {n}"
        raise PyFuShapeError(msg)
    grid_h, grid_w = valid.shape
    cells = np.flatnonzero(valid.reshape(-1))
    points = np.asarray(coords, dtype=np.float64).reshape(-1, 2)[cells]
    xs = np.clip(points[:, 0], 0.0, wf - 1)
    ys = np.clip(points[:, 1], 0.0, hf - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    fx = (xs - x0).astype(features.dtype)
    fy = (ys - y0).astype(features.dtype)
    corners = (
        (y0 * wf + x0, (1 - fx) * (1 - fy)),
        (y0 * wf + x1, fx * (1 - fy)),
        (y1 * wf + x0, (1 - fx) * fy),
        (y1 * wf + x1, fx * fy),
    )
    flat = features.data.reshape(c, hf * wf)
    samples = sum(flat[:, index] * weight for index, weight in corners)
    out = np.zeros((c, grid_h * grid_w), dtype=features.dtype)
    out[:, cells] = samples

    def _backward(grad: np.ndarray) -> tuple[np.ndarray]:
        picked = grad.reshape(c, grid_h * grid_w)[:, cells].T
        grad_flat = np.zeros((hf * wf, c), dtype=grad.dtype)
        for index, weight in corners:
            np.add.at(grad_flat, index, picked * weight[:, None])
        return (grad_flat.T.reshape(1, c, hf, wf),)

    return _record("bilinear_sample", out.reshape(1, c, grid_h, grid_w), (features,), _backward)


class Param:
    """Named trainable tensor; the optimizer never touches frozen parameters."""

    __slots__ = ("_frozen", "name", "tensor")

    def __init__(self, data: Any, name: str = "", *, frozen: bool = False) -> None:
        """Wrap the initial value."""
        self.tensor = Tensor(np.array(data, dtype=_STATE.dtype), requires_grad=not frozen)
        self.name = name
        self._frozen = frozen

    def __repr__(self) -> str:
        """Return a short description."""
        return f"Param({self.name!r}, shape={self.shape}, frozen={self._frozen})"

    @property
    def frozen(self) -> bool:
        """Return True when the parameter is excluded from training."""
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = value
        self.tensor.requires_grad = not value

    @property
    def data(self) -> np.ndarray:
        """Return the parameter value."""
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        """Return the accumulated gradient."""
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the value shape."""
        return self.tensor.shape


class Module:
    """Base class of network parts: named parameters, buffers and train/eval mode."""

    training: bool = True

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        """Run forward."""
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Compute the module output."""
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, Module]]:
        """Yield direct submodules (attributes, list and tuple members)."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for position, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{position}", item

    def modules(self) -> Iterator[Module]:
        """Yield this module and every descendant."""
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        """Yield (dotted path, Param) for every parameter."""
        for name, value in vars(self).items():
            if isinstance(value, Param):
                yield f"{prefix}{name}", value
        for name, child in self.children():
            yield from child.named_params(f"{prefix}{name}.")

    def params(self) -> list[Param]:
        """Return every parameter."""
        return [param for _, param in self.named_params()]

    def buffers(self) -> dict[str, np.ndarray]:
        """Return non-trainable state owned directly by this module."""
        return {}

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        """Replace a buffer owned directly by this module."""
        msg = f"{type(self).__name__} has no buffer {name}"
        raise PyFuValueError(msg)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Yield (dotted path, array) for every buffer."""
        for name, value in self.buffers().items():
            yield f"{prefix}{name}", value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def assign_names(self, prefix: str = "") -> None:
        """Store each parameter's dotted path as its name."""
        for name, param in self.named_params(prefix):
            param.name = name

    def freeze(self, *, frozen: bool = True) -> None:
        """Freeze or unfreeze every parameter."""
        for param in self.params():
            param.frozen = frozen

    def train(self, *, mode: bool = True) -> Module:
        """Switch this module and its descendants between batch and running statistics."""
        for module in self.modules():
            module.training = mode
        return self

    def zero_grad(self) -> None:
        """Drop accumulated gradients."""
        for param in self.params():
            param.tensor.grad = None

    def astype(self, dtype: type[np.floating]) -> Module:
        """Cast parameters and buffers, e.g. to 64-bit for gradient checks."""
        for param in self.params():
            param.tensor.data = param.tensor.data.astype(dtype)
        for module in self.modules():
            for name, value in module.buffers().items():
                module.load_buffer(name, value.astype(dtype))
        return self


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    """Scale trainable gradients so their global L2 norm is at most `max_norm`."""
    trainable = [param for param in params if not param.frozen and param.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(param.grad.astype(np.float64) ** 2)) for param in trainable)))
    if total > max_norm > 0:
        factor = max_norm / total
        for param in trainable:
            param.tensor.grad = param.grad * param.grad.dtype.type(factor)
    return total


def _check_finite(param: Param) -> None:
    if not np.all(np.isfinite(param.grad)):
        msg = f"Non-finite gradient in parameter {param.name or '<unnamed>'}"
        raise PyFuNumericalError(msg)


def sgd_step(
    params: Iterable[Param],
    lr: float,
    *,
    weight_decay: float = 0.0,
    momentum: float = 0.0,
    buffers: dict[int, np.ndarray] | None = None,
) -> None:
    """Apply p <- p - lr * (momentum buffer of g + wd * p); frozen params untouched."""
    if lr < 0:
        msg = f"Learning rate must be non-negative, got {lr}"
        raise PyFuValueError(msg)
    buffers = {} if buffers is None else buffers
    for param in params:
        if param.frozen or param.grad is None:
            continue
        _check_finite(param)
        update = param.grad + weight_decay * param.data if weight_decay else param.grad
        if momentum:
            previous = buffers.get(id(param))
            update = update.copy() if previous is None else momentum * previous + update
            buffers[id(param)] = update
        param.tensor.data = param.data - (lr * update).astype(param.data.dtype)


def adam_step(  # noqa: PLR0913
    params: Iterable[Param],
    lr: float,
    *,
    step: int,
    state: dict[int, tuple[np.ndarray, np.ndarray]],
    weight_decay: float = 0.0,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPSILON,
) -> None:
    """Apply one bias-corrected Adam update (L2 weight decay folded into the gradient)."""
    if lr < 0:
        msg = f"Learning rate must be non-negative, got {lr}"
        raise PyFuValueError(msg)
    beta1, beta2 = betas
    for param in params:
        if param.frozen or param.grad is None:
            continue
        _check_finite(param)
        grad = param.grad + weight_decay * param.data if weight_decay else param.grad
        first, second = state.get(id(param), (np.zeros_like(grad), np.zeros_like(grad)))
        first = beta1 * first + (1 - beta1) * grad
        second = beta2 * second + (1 - beta2) * grad * grad
        state[id(param)] = (first, second)
        first_hat = first / (1 - beta1**step)
        second_hat = second / (1 - beta2**step)
        param.tensor.data = param.data - (lr * first_hat / (np.sqrt(second_hat) + eps)).astype(param.data.dtype)


class SGD:
    """Stochastic gradient descent with momentum and weight decay."""

    def __init__(
        self,
        params: Sequence[Param],
        *,
        momentum: float,
        weight_decay: float,
        grad_clip: float | None = None,
    ) -> None:
        """Bind the parameter list."""
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self._buffers: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        """Drop accumulated gradients."""
        for param in self.params:
            param.tensor.grad = None

    def step(self, lr: float) -> None:
        """Update all trainable parameters."""
        if self.grad_clip:
            clip_grad_norm(self.params, self.grad_clip)
        sgd_step(
            self.params,
            lr,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            buffers=self._buffers,
        )


class Adam(SGD):
    """Adam optimizer sharing the SGD bookkeeping."""

    def __init__(
        self,
        params: Sequence[Param],
        *,
        weight_decay: float,
        grad_clip: float | None = None,
    ) -> None:
        """Bind the parameter list."""
        super().__init__(params, momentum=0.0, weight_decay=weight_decay, grad_clip=grad_clip)
        self._moments: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._step = 0

    def step(self, lr: float) -> None:
        """Update all trainable parameters."""
        if self.grad_clip:
            clip_grad_norm(self.params, self.grad_clip)
        self._step += 1
        adam_step(
            self.params,
            lr,
            step=self._step,
            state=self._moments,
            weight_decay=self.weight_decay,
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Return ||a - n|| / max(||a||, ||n||, floor)."""
    scale_ = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), GRADCHECK_FLOOR)
    return float(np.linalg.norm(analytic - numeric)) / scale_


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    *,
    step: float = GRADCHECK_STEP,
    samples: int = 16,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients against central finite differences.

    `fn` must rebuild the scalar loss from the current tensor values; the
    tensors should hold 64-bit data. Returns the worst relative error over
    a random sample of coordinates of each tensor.
    """
    rng = np.random.default_rng(seed)
    for tensor in tensors:
        tensor.grad = None
    backward(fn())
    worst = 0.0
    for tensor in tensors:
        analytic_full = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        picks = rng.choice(tensor.data.size, size=min(samples, tensor.data.size), replace=False)
        analytic = np.empty(picks.size)
        numeric = np.empty(picks.size)
        for slot, flat in enumerate(picks):
            position = np.unravel_index(flat, tensor.shape)
            original = tensor.data[position]
            with no_grad():
                tensor.data[position] = original + step
                plus = fn().item()
                tensor.data[position] = original - step
                minus = fn().item()
            tensor.data[position] = original
            analytic[slot] = analytic_full[position]
            numeric[slot] = (plus - minus) / (2 * step)
        error = relative_error(analytic, numeric)
        LOGGER.debug("gradcheck tensor %s: relative error %.3g", tensor.shape, error)
        worst = max(worst, error)
    return worst
