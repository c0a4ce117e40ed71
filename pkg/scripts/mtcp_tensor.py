"""
Minimal dense tensor engine with tape-based reverse-mode differentiation.

Every tensor holds float64 elements in row-major order. Operations executed
while a ComputationTape is active (``with ComputationTape():``) are recorded
when at least one input requires a gradient; ``backward(loss)`` replays the
tape in reverse exactly once. Outside a tape nothing is recorded, which is how
evaluation runs without gradient bookkeeping.

Any non-finite value produced by a forward or backward step raises
NumericError naming the producing operation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mtcp_errors import ConfigurationError, DomainError, NumericError, ShapeError, StateError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]
GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

CONV_KERNEL_SIZES = (1, 2, 3, 7)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-8
IGNORE_INDEX = 255


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array plus an optional gradient accumulator."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.require(np.asarray(data, dtype=np.float64), requirements="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Optional[ComputationTape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; every operator delegates to a module-level primitive.
    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmax(self, axis, keepdims)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


class ComputationTape:
    """Ordered record of primitive operations; inputs always precede outputs."""

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> ComputationTape:
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        if self.consumed:
            raise StateError("cannot record onto a tape that has already been replayed")
        self.entries.append(entry)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
        if self.consumed:
            raise StateError("double backward is not supported; record a fresh tape")
        for entry in self.entries:
            entry.output.grad = np.zeros_like(entry.output.data)
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            upstream = entry.output.grad
            if upstream is None or not upstream.any():
                continue
            grads = entry.grad_fn(upstream)
            for inp, grad in zip(entry.inputs, grads):
                if grad is None or not inp.requires_grad:
                    continue
                _check_finite(f"{entry.op}.backward", grad)
                if inp.grad is None or inp.grad.shape != inp.data.shape:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += grad
        self.consumed = True
        logger.debug("replayed tape with %d entries", len(self.entries))
        self.entries = []


_TAPE_STACK: List[ComputationTape] = []


def active_tape() -> Optional[ComputationTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._tape is None:
        raise StateError("loss was not produced under an active ComputationTape")
    loss._tape.backward(loss)


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        bad = int(np.size(data) - np.count_nonzero(np.isfinite(data)))
        raise NumericError(f"non-finite values from {op}: {bad} of {np.size(data)} elements, shape {np.shape(data)}")


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(TapeEntry(op, tuple(inputs), out, grad_fn))
    return out


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape)


# ---------------------------------------------------------------------------
# Elementwise suite
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _result(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _result("log", y, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)
    return _result("sqrt", y, (x,), lambda g: (g * 0.5 / y,))


def tabs(x: Tensor) -> Tensor:
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing only; advanced indices may repeat positions."""

    def grad_fn(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[index] += g
        return (full,)

    return _result("getitem", np.array(x.data[index]), (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        off_a = tensors[0].shape[:axis] + tensors[0].shape[axis + 1 :]
        off_b = t.shape[:axis] + t.shape[axis + 1 :]
        if t.ndim != ndim or off_a != off_b:
            raise ShapeError(f"concat along axis {axis}: shapes {tensors[0].shape} and {t.shape} differ off-axis")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover axis {axis} of shape {x.shape}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        pieces.append(getitem(x, tuple(index)))
        start += size
    return pieces


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    return _result(
        "sum",
        np.asarray(x.data.sum(axis=axes, keepdims=keepdims)),
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims),),
    )


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape
    return _result(
        "mean",
        np.asarray(x.data.mean(axis=axes, keepdims=keepdims)),
        (x,),
        lambda g: (_expand_reduced(g, shape, axes, keepdims) / count,),
    )


def tmax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    peak = x.data.max(axis=axes, keepdims=True)
    mask = (x.data == peak).astype(np.float64)
    mask /= mask.sum(axis=axes, keepdims=True)
    out = peak if keepdims else np.squeeze(peak, axis=axes)
    shape = x.shape
    return _result("max", np.asarray(out), (x,), lambda g: (_expand_reduced(g, shape, axes, keepdims) * mask,))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# Linear algebra and spatial operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g: np.ndarray):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), grad_fn)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"conv2d output size ({size}+2*{padding}-{kernel})/{stride}+1 is not integral"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in×H×W map with a C_out×C_in×k×k kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and 4-d kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if c_in != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh != kw or kh not in CONV_KERNEL_SIZES:
        raise ConfigurationError(f"conv2d kernel must be square with size in {CONV_KERNEL_SIZES}, got {kh}x{kw}")
    k = kh
    out_h = conv_output_size(x.shape[1], k, stride, padding)
    out_w = conv_output_size(x.shape[2], k, stride, padding)
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    out = np.tensordot(kernel.data, windows, axes=([1, 2, 3], [0, 3, 4]))

    def grad_fn(g: np.ndarray):
        g_kernel = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        g_windows = np.tensordot(kernel.data, g, axes=([0], [0]))
        g_padded = np.zeros_like(padded)
        for ki in range(k):
            for kj in range(k):
                rows = slice(ki, ki + stride * (out_h - 1) + 1, stride)
                cols = slice(kj, kj + stride * (out_w - 1) + 1, stride)
                g_padded[:, rows, cols] += g_windows[:, ki, kj]
        g_x = g_padded[:, padding : padding + x.shape[1], padding : padding + x.shape[2]]
        return g_x, g_kernel

    return _result("conv2d", out, (x, kernel), grad_fn)


def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Row-stochastic 1-d linear interpolation weights (align_corners=False)."""
    scale = size_in / size_out
    src = np.maximum((np.arange(size_out) + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(int), size_in - 1)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = src - lo
    weights = np.zeros((size_out, size_in))
    rows = np.arange(size_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"bilinear_resize target must be at least 1x1, got {out_h}x{out_w}")
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects C×H×W, got {x.shape}")
    rows = interpolation_matrix(x.shape[1], out_h)
    cols = interpolation_matrix(x.shape[2], out_w)
    out = rows @ x.data @ cols.T
    return _result("bilinear_resize", out, (x,), lambda g: (rows.T @ g @ cols,))


def l2_normalize(x: Tensor, axis: int = 0, eps: float = NORM_EPS) -> Tensor:
    """x / (||x|| + eps) along ``axis``; the gradient is zero where ||x|| = 0."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = norm + eps
    y = x.data / denom

    def grad_fn(g: np.ndarray):
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            coeff = np.where(norm > 0, dot / (norm * denom * denom), 0.0)
        return (g / denom - x.data * coeff,)

    return _result("l2_normalize", y, (x,), grad_fn)


def cosine_similarity_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-location cosine similarity of two C×H×W maps (eps added to norms)."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity_map shape mismatch: {a.shape} vs {b.shape}")
    return tsum(l2_normalize(a, 0) * l2_normalize(b, 0), axis=0)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over spatial positions of a C×H×W map.

    Training mode normalises with the map's own statistics and folds them into
    the running estimates in place (unbiased variance, as torch does); eval
    mode uses the running estimates.
    """
    channels = x.shape[0]
    if x.ndim != 3 or gamma.shape != (channels,) or beta.shape != (channels,) or running_mean.shape != (channels,):
        raise ShapeError(f"batchnorm2d channel mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    scale = gamma.reshape(channels, 1, 1)
    shift = beta.reshape(channels, 1, 1)
    if training:
        centred = x - mean(x, axis=(1, 2), keepdims=True)
        var = mean(centred * centred, axis=(1, 2), keepdims=True)
        normed = centred / sqrt(var + eps)
        count = x.shape[1] * x.shape[2]
        unbiased = var.data.reshape(channels) * (count / (count - 1) if count > 1 else 1.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * x.data.mean(axis=(1, 2))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        normed = (x - running_mean.reshape(channels, 1, 1)) / np.sqrt(running_var.reshape(channels, 1, 1) + eps)
    return normed * scale + shift


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalise over the last axis."""
    centred = x - mean(x, axis=-1, keepdims=True)
    var = mean(centred * centred, axis=-1, keepdims=True)
    return centred / sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# Loss suite
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean cross-entropy of K×H×W logits against H×W integer labels."""
    num_classes = logits.shape[0]
    labels = np.asarray(labels)
    if logits.ndim != 3 or labels.shape != logits.shape[1:]:
        raise ShapeError(f"cross_entropy expects K×H×W logits and H×W labels, got {logits.shape} and {labels.shape}")
    labels = labels.astype(np.int64)
    valid = labels != ignore_index
    if ((labels[valid] < 0) | (labels[valid] >= num_classes)).any():
        raise DomainError(f"labels must lie in [0, {num_classes}) or equal ignore_index {ignore_index}")
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=0))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(z, safe[None], axis=0)[0]
    nll = (log_norm - picked) * valid
    loss = nll.sum() / count if count else 0.0

    def grad_fn(g: np.ndarray):
        if not count:
            return (np.zeros_like(logits.data),)
        probs = np.exp(z - log_norm[None])
        np.put_along_axis(probs, safe[None], np.take_along_axis(probs, safe[None], axis=0) - 1.0, axis=0)
        return (probs * valid[None] * (float(g) / count),)

    return _result("cross_entropy", np.asarray(loss), (logits,), grad_fn)


def l1(pred: Tensor, target: ArrayLike) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1 shape mismatch: {pred.shape} vs {target.shape}")
    return mean(tabs(pred - target))


def l1_normalized(pred: Tensor, target: ArrayLike) -> Tensor:
    """L1 after L2-normalising each prediction vector along the channel axis."""
    if pred.ndim != 3 or pred.shape[0] != 3:
        raise ShapeError(f"l1_normalized expects 3×H×W predictions, got {pred.shape}")
    return l1(l2_normalize(pred, 0), target)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4, floor: float = 1e-8) -> float:
    """Worst relative error between tape gradient and central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    was_tracked = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    with ComputationTape():
        value = f(x)
    backward(value)
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(f(x).data)
        flat[i] = original - h
        minus = float(f(x).data)
        flat[i] = original
        numeric = (plus - minus) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    x.requires_grad = was_tracked
    if not was_tracked:
        x.grad = None
    if math.isnan(worst):
        raise NumericError("grad_check produced NaN relative error")
    return worst
