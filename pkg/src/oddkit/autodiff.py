"""Dense n-d arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every operation applied to tensors that
require gradients records a closure on the output; :func:`backward` walks that
record in reverse topological order. The record is rebuilt on every forward
pass, so models are plain Python functions.

Image tensors use NHWC layout throughout. Convolution kernels are
``[k, k, in, out]``; transposed-convolution kernels are ``[k, k, out, in]``,
so ``deconv2d(y, K, s)`` is exactly the adjoint of ``conv2d(x, K, s)``.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import BinaryIO, Callable, Iterable, Mapping

import numpy as np

from .errors import NumericDomainError, ParseError, ShapeError, ValidationError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (inference, validation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b):
    # plain numbers and arrays adopt the tensor operand's dtype
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), backward)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2.0 * out),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions and shape

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else math.prod(
        x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,)))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x[B, I]``, ``weight[I, O]``, ``bias[O]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is None:
        return matmul(x, weight)
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd, bd = x.data, weight.data, bias.data
    return _make(xd @ wd + bd, (x, weight, bias),
                 lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------- normalized maps

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def l2_normalize(x, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale vectors along ``axis`` to unit norm.

    With ``eps == 0`` a zero vector raises; otherwise the norm is floored at ``eps``.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if eps == 0.0:
        if np.any(norm == 0):
            raise NumericDomainError("cannot normalize a zero-norm vector")
    else:
        norm = np.maximum(norm, eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), backward)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors (1-d tensors), as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_sim expects two equal-length vectors, got {a.shape} and {b.shape}")
    return tsum(l2_normalize(a) * l2_normalize(b))


def entropy(p, axis: int = -1) -> Tensor:
    """``sum(-p log p)`` along ``axis`` with ``0 log 0 = 0``."""
    p = as_tensor(p)
    if np.any(p.data < 0):
        raise NumericDomainError("entropy of negative weights")
    pos = p.data > 0
    logp = np.log(np.where(pos, p.data, 1.0))
    out = -(p.data * logp).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (np.where(pos, -(logp + 1.0), 0.0).astype(p.dtype) * g,)

    return _make(out, (p,), backward)


# ---------------------------------------------------------------- convolution

def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for "same"-style convolution."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # [B, oh, ow, C, k, k] strided view
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return view[:, : (oh - 1) * stride + 1: stride, : (ow - 1) * stride + 1: stride]


def _conv_forward(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    k = kernel.shape[0]
    _, h, w, _ = x.shape
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(w, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    cols = _windows(xp, k, stride, oh, ow)
    return np.tensordot(cols, kernel, axes=([3, 4, 5], [2, 0, 1]))


def _conv_input_grad(g: np.ndarray, kernel: np.ndarray, stride: int, in_hw: tuple[int, int]) -> np.ndarray:
    k = kernel.shape[0]
    h, w = in_hw
    bsz, oh, ow, _ = g.shape
    _, pt, pb = same_padding(h, k, stride)
    _, pl, pr = same_padding(w, k, stride)
    cin = kernel.shape[2]
    gp = np.zeros((bsz, h + pt + pb, w + pl + pr, cin), dtype=np.result_type(g, kernel))
    for i in range(k):
        for j in range(k):
            gp[:, i: i + (oh - 1) * stride + 1: stride, j: j + (ow - 1) * stride + 1: stride] += g @ kernel[i, j].T
    return gp[:, pt: pt + h, pl: pl + w]


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    _, h, w, _ = x.shape
    oh, pt, pb = same_padding(h, k, stride)
    ow, pl, pr = same_padding(w, k, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    cols = _windows(xp, k, stride, oh, ow)
    gk = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))  # [C, k, k, O]
    return gk.transpose(1, 2, 0, 3)


def _check_conv(x: Tensor, kernel: Tensor, stride: int, in_axis: int, name: str):
    if stride < 1:
        raise ValidationError(f"{name}: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] < 1:
        raise ShapeError(f"{name}: expected x[B,H,W,C] and square kernel[k,k,.,.], got {x.shape} and {kernel.shape}")
    if x.shape[3] != kernel.shape[in_axis]:
        raise ShapeError(f"{name}: input channels {x.shape[3]} do not match kernel {kernel.shape}")


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding; output spatial size is ``ceil(H / stride)``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv(x, kernel, stride, 2, "conv2d")
    xd, kd = x.data, kernel.data
    out = _conv_forward(xd, kd, stride)
    k = kd.shape[0]

    def backward(g):
        gx = _conv_input_grad(g, kd, stride, xd.shape[1:3]) if x.requires_grad else None
        gk = _conv_kernel_grad(xd, g, k, stride) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), backward)


def deconv2d(x, kernel, stride: int = 1) -> Tensor:
    """Transposed convolution; output spatial size is ``H * stride``.

    ``kernel`` is ``[k, k, out, in]``; the result is the adjoint of
    :func:`conv2d` applied with the same kernel.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv(x, kernel, stride, 3, "deconv2d")
    xd, kd = x.data, kernel.data
    out_hw = (xd.shape[1] * stride, xd.shape[2] * stride)
    out = _conv_input_grad(xd, kd, stride, out_hw)
    k = kd.shape[0]

    def backward(g):
        gx = _conv_forward(g, kd, stride) if x.requires_grad else None
        gk = _conv_kernel_grad(g, xd, k, stride) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), backward)


# ---------------------------------------------------------------- batch normalization

class RunningStats:
    """Per-channel running moments updated as ``m <- momentum * m + (1 - momentum) * batch``."""

    def __init__(self, channels: int, momentum: float = 0.99, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


BN_EPSILON = 1e-7


def batch_norm(x, gamma, beta, stats: RunningStats | None = None, training: bool = True,
               eps: float = BN_EPSILON) -> Tensor:
    """Per-channel standardization over every axis but the last, then ``gamma * xhat + beta``.

    In training mode the batch moments are used and ``stats`` (if given) is
    updated; in inference mode ``stats`` supplies the moments.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta {gamma.shape}/{beta.shape} do not match channels {c}")
    axes = tuple(range(x.ndim - 1))
    xd, gd = x.data, gamma.data
    if training:
        if x.shape[0] < 2:
            raise ValidationError("batch_norm in training mode requires a batch of at least 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if stats is not None:
            m = stats.momentum
            stats.mean = (m * stats.mean + (1 - m) * mu).astype(stats.mean.dtype)
            stats.var = (m * stats.var + (1 - m) * var).astype(stats.var.dtype)
    else:
        if stats is None:
            raise ValidationError("batch_norm in inference mode needs running statistics")
        mu, var = stats.mean.astype(xd.dtype), stats.var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat * gd + beta.data
    n = xd.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd
        if training:
            gx = inv_std / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- backward pass

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every recorded leaf.

    When ``params`` is given, their gradients are reset first and a
    ``path -> gradient`` map is returned; parameters the loss does not reach
    get zero gradients.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params.values():
            p.grad = None
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    out = {}
    for path, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[path] = p.grad
    return out


# ---------------------------------------------------------------- parameter checkpoint files

CHECKPOINT_MAGIC = b"ODKT"
CHECKPOINT_VERSION = 1


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as little-endian float32 records."""
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for path, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = path.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ParseError("truncated tensor checkpoint", offset=fh.tell())
        return buf

    if take(4) != CHECKPOINT_MAGIC:
        raise ParseError("not a tensor checkpoint (bad magic)", offset=0)
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    out = {}
    for _ in range(count):
        (plen,) = struct.unpack("<I", take(4))
        path = take(plen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(dims)
        out[path] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return out


def parameters(tensors: Iterable[tuple[str, np.ndarray]], dtype=np.float64) -> dict[str, Tensor]:
    """Build a parameter map (every entry requires gradients)."""
    return {path: Tensor(np.asarray(arr, dtype=dtype), requires_grad=True) for path, arr in tensors}
