"""
Differentiable operator set for the 3D encoder-decoder.

Activations are channel-first numpy arrays (N, C, D, H, W). Every op is a
pair of functions: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> gradients``. Ops keep the dtype of their
inputs, so the same code runs in float32 for training and float64 for
gradient checks.
"""
from dataclasses import dataclass, field
from typing import Iterable, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import DivergenceError, UsageError

Cache = tuple


@dataclass
class Parameter:
    """Trainable tensor with its accumulated gradient."""
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise UsageError(f"Gradient shape {self.grad.shape} differs from value shape {self.value.shape} for {self.name}")

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _check_activation(x: np.ndarray, op: str) -> None:
    if x.ndim != 5:
        raise UsageError(f"{op} expects an (N, C, D, H, W) tensor, got shape {x.shape}")


# -- convolutions -------------------------------------------------------------

def conv3d_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """3x3x3 cross-correlation with zero padding 1; spatial dims preserved."""
    _check_activation(x, "conv3d_same")
    if weight.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise UsageError(f"conv3d_same weight must be (Cout, Cin, 3, 3, 3), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise UsageError(f"conv3d_same: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise UsageError(f"conv3d_same bias must be ({weight.shape[0]},), got {bias.shape}")

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))  # N, C, D, H, W, 3, 3, 3
    out = np.tensordot(windows, weight, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # N, D, H, W, Cout
    out = np.moveaxis(out, -1, 1) + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype), (windows, weight)


def conv3d_same_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    windows, weight = cache
    dweight = np.tensordot(dout, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # Cout, Cin, 3, 3, 3
    dbias = dout.sum(axis=(0, 2, 3, 4))
    # full correlation of the output gradient with the flipped kernel
    dp = np.pad(dout, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    dwin = sliding_window_view(dp, (3, 3, 3), axis=(2, 3, 4))
    flipped = weight[:, :, ::-1, ::-1, ::-1]
    dx = np.tensordot(dwin, flipped, axes=([1, 5, 6, 7], [0, 2, 3, 4]))  # N, D, H, W, Cin
    dx = np.moveaxis(dx, -1, 1)
    return np.ascontiguousarray(dx, dtype=dout.dtype), dweight.astype(weight.dtype), dbias.astype(weight.dtype)


def conv3d_1x1(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """Pointwise channel mixing."""
    _check_activation(x, "conv3d_1x1")
    if weight.ndim != 5 or weight.shape[2:] != (1, 1, 1):
        raise UsageError(f"conv3d_1x1 weight must be (Cout, Cin, 1, 1, 1), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise UsageError(f"conv3d_1x1: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise UsageError(f"conv3d_1x1 bias must be ({weight.shape[0]},), got {bias.shape}")
    w2 = weight[:, :, 0, 0, 0]
    out = np.moveaxis(np.tensordot(x, w2, axes=([1], [1])), -1, 1) + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype), (x, weight)


def conv3d_1x1_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weight = cache
    w2 = weight[:, :, 0, 0, 0]
    dx = np.moveaxis(np.tensordot(dout, w2, axes=([1], [0])), -1, 1)
    dw2 = np.tensordot(dout, x, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    dbias = dout.sum(axis=(0, 2, 3, 4))
    return (
        np.ascontiguousarray(dx, dtype=dout.dtype),
        dw2.reshape(weight.shape).astype(weight.dtype),
        dbias.astype(weight.dtype),
    )


def upconv3d_2(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """Transposed convolution, kernel 2, stride 2: doubles D, H and W."""
    _check_activation(x, "upconv3d_2")
    if weight.ndim != 5 or weight.shape[2:] != (2, 2, 2):
        raise UsageError(f"upconv3d_2 weight must be (Cin, Cout, 2, 2, 2), got {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise UsageError(f"upconv3d_2: input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise UsageError(f"upconv3d_2 bias must be ({weight.shape[1]},), got {bias.shape}")
    N, _, D, H, W = x.shape
    cout = weight.shape[1]
    t = np.tensordot(x, weight, axes=([1], [0]))  # N, D, H, W, Cout, 2, 2, 2
    t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7)  # N, Cout, D, 2, H, 2, W, 2
    out = t.reshape(N, cout, 2 * D, 2 * H, 2 * W) + bias.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out, dtype=x.dtype), (x, weight)


def upconv3d_2_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, weight = cache
    N, _, D, H, W = x.shape
    cout = weight.shape[1]
    g = dout.reshape(N, cout, D, 2, H, 2, W, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7)  # N, D, H, W, Cout, 2, 2, 2
    dx = np.moveaxis(np.tensordot(g, weight, axes=([4, 5, 6, 7], [1, 2, 3, 4])), -1, 1)
    dweight = np.tensordot(x, g, axes=([0, 2, 3, 4], [0, 1, 2, 3]))  # Cin, Cout, 2, 2, 2
    dbias = dout.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx, dtype=dout.dtype), dweight.astype(weight.dtype), dbias.astype(weight.dtype)


# -- pooling, activations, plumbing ---------------------------------------------

def maxpool3d_2(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """Non-overlapping 2x2x2 max; ties resolve to the lowest linear index."""
    _check_activation(x, "maxpool3d_2")
    N, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise UsageError(f"maxpool3d_2 needs even spatial dims, got {(D, H, W)}")
    blocks = x.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(N, C, D // 2, H // 2, W // 2, 8)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, argmax)


def maxpool3d_2_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    shape, argmax = cache
    N, C, D, H, W = shape
    routed = np.zeros(argmax.shape + (8,), dtype=dout.dtype)
    np.put_along_axis(routed, argmax[..., None], dout[..., None], axis=-1)
    routed = routed.reshape(N, C, D // 2, H // 2, W // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(routed.reshape(shape))


def relu(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), (mask,)


def relu_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    (mask,) = cache
    return np.where(mask, dout, np.zeros((), dtype=dout.dtype))


def concat_channels(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """Channels of ``a`` followed by channels of ``b``."""
    _check_activation(a, "concat_channels")
    _check_activation(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise UsageError(f"concat_channels: shapes {a.shape} and {b.shape} disagree outside the channel axis")
    return np.concatenate([a, b], axis=1), (a.shape[1],)


def concat_channels_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray]:
    (ca,) = cache
    return dout[:, :ca], dout[:, ca:]


def softmax_channels(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    """Per-voxel softmax over the channel axis, max-shifted for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return y, (y,)


def softmax_channels_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    (y,) = cache
    return y * (dout - (dout * y).sum(axis=1, keepdims=True))


# -- initialization and update ----------------------------------------------------

def he_std(fan_in: int) -> float:
    if fan_in <= 0:
        raise UsageError(f"fan_in must be positive, got {fan_in}")
    return float(np.sqrt(2.0 / fan_in))


def he_init(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Gaussian weights with std sqrt(2 / fan_in)."""
    return rng.normal(0.0, he_std(fan_in), size=shape).astype(dtype)


def sgd_step(params: Iterable[Parameter], lr: float) -> List[Parameter]:
    """Plain SGD: value -= lr * grad, then grads are zeroed."""
    if not lr > 0:
        raise UsageError(f"Learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"Non-finite gradient for parameter {p.name}")
    for p in params:
        p.value -= (lr * p.grad).astype(p.value.dtype)
        p.zero_grad()
    return params
