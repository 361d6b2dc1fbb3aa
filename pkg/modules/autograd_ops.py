"""
Autograd Ops Module

This module provides a small reverse-mode automatic differentiation engine over numpy arrays
and the operator set of the co-segmentation network: strided/dilated convolution, pooling,
activations, fully connected layers, channel statistics, bilinear upsampling and pixel-wise
cross-entropy.

Every op records a closure that maps the output gradient to gradients of its inputs;
`Tensor.backward` replays them in reverse topological order.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit, log_softmax, softmax

from modules.image_grid import sample_positions

logger = logging.getLogger(__name__)


class AutogradError(ValueError):
    """Raised for non-finite values or misuse of the differentiation engine."""


class NetworkShapeError(ValueError):
    """Raised when operator inputs have incompatible shapes."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    float64 array with an optional gradient and the record of the op that produced it.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = '',
                 parents: Tuple['Tensor', ...] = (), backward_fn: Optional[BackwardFn] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ''
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def zero_grad(self) -> None:
        self.grad = None

    def _topological_order(self) -> List['Tensor']:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into `.grad` of every leaf that requires gradients.

        Raises:
            AutogradError: the tensor was not produced by a recorded forward op, or a non-scalar
                output was given no seed gradient
        """
        if self._backward_fn is None:
            raise AutogradError("backward called before forward: tensor has no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise AutogradError(f"backward on non-scalar output {self.shape} needs a seed gradient")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


Operand = Union[Tensor, float, int, np.ndarray]


def as_tensor(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise AutogradError(f"{op} produced non-finite values")
    return Tensor(data, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_rank(x: Tensor, rank: int, op: str) -> None:
    if x.data.ndim != rank:
        raise NetworkShapeError(f"{op} expects a rank-{rank} input, got shape {x.shape}")


# Elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise NetworkShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), 'add')


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise NetworkShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, 'mul')


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,), 'relu')


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise NetworkShapeError(f"reshape: cannot view {x.shape} as {shape}") from e
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), 'reshape')


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise NetworkShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), 'concat')


# Convolution and pooling

def _windows(xp: np.ndarray, kh: int, kw: int, out_h: int, out_w: int, stride: int, dilation: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, out_h, out_w, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False,
    )


def _output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """
    2-D cross-correlation.

    Args:
        x: (N, C, H, W) input
        weight: (F, C, kh, kw) filters
        bias: Optional (F,) offsets
        stride: Step between output samples
        padding: Zero padding on every side
        dilation: Spacing between kernel taps

    Returns:
        (N, F, Ho, Wo) tensor with Ho = (H + 2p − d(kh−1) − 1)//s + 1, likewise Wo
    """
    _check_rank(x, 4, 'conv2d')
    _check_rank(weight, 4, 'conv2d weight')
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise NetworkShapeError(f"conv2d: input channels C={c} do not match weight channels {wc}")
    if bias is not None and bias.shape != (f,):
        raise NetworkShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    if stride < 1 or dilation < 1 or padding < 0:
        raise NetworkShapeError(f"conv2d: invalid stride={stride}, padding={padding}, dilation={dilation}")
    out_h = _output_extent(h, kh, stride, padding, dilation)
    out_w = _output_extent(w, kw, stride, padding, dilation)
    if out_h < 1:
        raise NetworkShapeError(f"conv2d: input height H={h} too small for kernel {kh} (dilation {dilation})")
    if out_w < 1:
        raise NetworkShapeError(f"conv2d: input width W={w} too small for kernel {kw} (dilation {dilation})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(xp, kh, kw, out_h, out_w, stride, dilation)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        d_weight = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        d_bias = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        d_x = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            span_h, span_w = stride * (out_h - 1) + 1, stride * (out_w - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    r0, c0 = i * dilation, j * dilation
                    dxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += contrib
            d_x = dxp[:, :, padding:padding + h, padding:padding + w]
        return (d_x, d_weight, d_bias) if bias is not None else (d_x, d_weight)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(np.ascontiguousarray(out), parents, backward, 'conv2d')


def max_pool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling without padding; gradient goes to the first maximal tap."""
    _check_rank(x, 4, 'max_pool2d')
    stride = stride or size
    n, c, h, w = x.shape
    out_h, out_w = (h - size) // stride + 1, (w - size) // stride + 1
    if out_h < 1 or out_w < 1:
        raise NetworkShapeError(f"max_pool2d: input {h}x{w} smaller than window {size}")
    cols = _windows(np.ascontiguousarray(x.data), size, size, out_h, out_w, stride, 1)
    flat = cols.reshape(n, c, out_h, out_w, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        span_h, span_w = stride * (out_h - 1) + 1, stride * (out_w - 1) + 1
        for t in range(size * size):
            i, j = divmod(t, size)
            dx[:, :, i:i + span_h:stride, j:j + span_w:stride] += g * (arg == t)
        return (dx,)

    return _result(out, (x,), backward, 'max_pool2d')


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank(x, 4, 'global_avg_pool')
    h, w = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), 'global_avg_pool')


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """(N, Din) @ (Dout, Din)ᵀ + (Dout,)."""
    _check_rank(x, 2, 'fully_connected')
    _check_rank(weight, 2, 'fully_connected weight')
    if x.shape[1] != weight.shape[1]:
        raise NetworkShapeError(
            f"fully_connected: input features D={x.shape[1]} do not match weight columns {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward, 'fully_connected')


# Channel statistics and normalization

def channel_mean(x: Tensor) -> Tensor:
    _check_rank(x, 4, 'channel_mean')
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),), 'channel_mean')


def channel_max(x: Tensor) -> Tensor:
    _check_rank(x, 4, 'channel_max')
    arg = x.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(x.data, arg, axis=1)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg, g, axis=1)
        return (dx,)

    return _result(out, (x,), backward, 'channel_max')


def softmax_channels(x: Tensor) -> Tensor:
    _check_rank(x, 4, 'softmax_channels')
    out = softmax(x.data, axis=1)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward, 'softmax_channels')


# Resampling

def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) corner-aligned linear interpolation weights."""
    lower, upper, frac = sample_positions(n_in, n_out)
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lower), 1.0 - frac)
    np.add.at(matrix, (rows, upper), frac)
    return matrix


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize of every (N, C) plane to out_h × out_w."""
    _check_rank(x, 4, 'bilinear_upsample')
    if out_h < 1 or out_w < 1:
        raise NetworkShapeError(f"bilinear_upsample: invalid output size {out_h}x{out_w}")
    ry = interpolation_matrix(x.shape[2], out_h)
    rx = interpolation_matrix(x.shape[3], out_w)
    out = np.einsum('ih,nchw,jw->ncij', ry, x.data, rx, optimize=True)
    return _result(out, (x,), lambda g: (np.einsum('ih,ncij,jw->nchw', ry, g, rx, optimize=True),),
                   'bilinear_upsample')


# Loss

def pixel_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """
    Mean over batch and pixels of −log softmax(logits)[target].

    Args:
        logits: (N, K, H, W) class scores
        target: (N, H, W) integer class map

    Returns:
        Scalar loss tensor
    """
    _check_rank(logits, 4, 'pixel_cross_entropy')
    target = np.asarray(target)
    n, k, h, w = logits.shape
    if target.shape != (n, h, w):
        raise NetworkShapeError(f"pixel_cross_entropy: target shape {target.shape} does not match {(n, h, w)}")
    if target.min(initial=0) < 0 or target.max(initial=0) >= k:
        raise NetworkShapeError(f"pixel_cross_entropy: target classes must lie in [0, {k})")
    log_p = log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(log_p, target[:, None].astype(np.int64), axis=1)
    count = n * h * w
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(log_p)
        np.put_along_axis(grad, target[:, None].astype(np.int64),
                          np.take_along_axis(grad, target[:, None].astype(np.int64), axis=1) - 1.0, axis=1)
        return (grad * (g / count),)

    return _result(np.array(loss), (logits,), backward, 'pixel_cross_entropy')
