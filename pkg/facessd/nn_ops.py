"""
Convolution, max-pooling and conv-block building blocks with exact backward passes.

All feature maps are single images laid out as [C, H, W]; minibatching is a loop
in the trainer.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ShapeError
from .tensor import Tensor


class ConvSpec(BaseModel):
    """Convolution layer parameters: (number of kernels, kernel size, stride, padding)."""
    model_config = ConfigDict(frozen=True)

    num_kernels: int = Field(ge=1)
    kernel_size: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)

    def output_size(self, in_size: int) -> int:
        return _output_size(in_size, self.kernel_size, self.stride, self.padding)


class PoolSpec(BaseModel):
    """Pool layer parameters: (kernel size, stride, padding)."""
    model_config = ConfigDict(frozen=True)

    kernel_size: int = Field(ge=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)

    def output_size(self, in_size: int) -> int:
        return _output_size(in_size, self.kernel_size, self.stride, self.padding)


def _output_size(in_size: int, kernel: int, stride: int, pad: int) -> int:
    # floor semantics: 75 -> 37 and 37 -> 18 for (2, 2, 0) pools
    out = (in_size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"non-positive output size for input {in_size} (kernel={kernel}, stride={stride}, pad={pad})"
        )
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, out_h: int, out_w: int) -> np.ndarray:
    C = x.shape[0]
    img = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="constant")
    cols = np.empty((C, k, k, out_h, out_w), dtype=x.dtype)
    for ky in range(k):
        y_max = ky + stride * out_h
        for kx in range(k):
            x_max = kx + stride * out_w
            cols[:, ky, kx] = img[:, ky:y_max:stride, kx:x_max:stride]
    return cols.reshape(C * k * k, out_h * out_w)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, pad: int, out_h: int, out_w: int) -> np.ndarray:
    C, H, W = shape
    cols = cols.reshape(C, k, k, out_h, out_w)
    img = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ky in range(k):
        y_max = ky + stride * out_h
        for kx in range(k):
            x_max = kx + stride * out_w
            img[:, ky:y_max:stride, kx:x_max:stride] += cols[:, ky, kx]
    return img[:, pad:pad + H, pad:pad + W]


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec):
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [C, H, W], got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv weight must be [K, C, k, k], got {w.shape}")
    K, C, kh, kw = w.shape
    if kh != kw or kh != spec.kernel_size or K != spec.num_kernels:
        raise ShapeError(f"conv weight {w.shape} does not match {spec}")
    if C != x.shape[0]:
        raise ShapeError(f"conv weight expects {C} input channels, input has {x.shape[0]}")
    if b.shape != (K,):
        raise ShapeError(f"conv bias must be ({K},), got {b.shape}")


def conv2d_forward(x: Tensor, w: Tensor, b: Tensor, spec: ConvSpec) -> Tensor:
    """
    Cross-correlation with zero padding via im2col.

    Args:
        x: input [C, H, W]
        w: weights [K, C, k, k]
        b: bias [K]
        spec: layer parameters

    Returns:
        output [K, H', W'] recorded on the tape with gradients for x, w and b
    """
    _check_conv_shapes(x, w, b, spec)
    k, stride, pad = spec.kernel_size, spec.stride, spec.padding
    out_h = spec.output_size(x.shape[1])
    out_w = spec.output_size(x.shape[2])

    cols = _im2col(x.data, k, stride, pad, out_h, out_w)
    w2 = w.data.reshape(w.shape[0], -1)
    out = (w2 @ cols + b.data[:, None]).reshape(w.shape[0], out_h, out_w)

    def _backward(node, grad):
        xt, wt, _ = node.inputs
        g2 = grad.reshape(grad.shape[0], -1)
        cols_saved = node.saved["cols"]
        grad_w = (g2 @ cols_saved.T).reshape(wt.shape) if wt.requires_grad else None
        grad_b = g2.sum(axis=1) if node.inputs[2].requires_grad else None
        grad_x = None
        if xt.requires_grad:
            dcols = wt.data.reshape(wt.shape[0], -1).T @ g2
            grad_x = _col2im(dcols, xt.shape, k, stride, pad, out_h, out_w)
        return grad_x, grad_w, grad_b

    return Tensor.from_op(out, "conv2d", (x, w, b), _backward, cols=cols)


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct-loop convolution (forward only); reference for the im2col path."""
    K, C, k, _ = w.shape
    pad, stride = spec.padding, spec.stride
    out_h = spec.output_size(x.shape[1])
    out_w = spec.output_size(x.shape[2])
    img = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="constant")
    out = np.empty((K, out_h, out_w), dtype=x.dtype)
    for o in range(K):
        for i in range(out_h):
            for j in range(out_w):
                window = img[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(window * w[o]) + b[o]
    return out


def maxpool2d(x: Tensor, spec: PoolSpec) -> Tensor:
    """
    Per-window maximum; padding never wins a window.

    Backward routes each window's gradient to its argmax, the first
    row-major position on ties.
    """
    if x.ndim != 3:
        raise ShapeError(f"pool input must be [C, H, W], got {x.shape}")
    k, stride, pad = spec.kernel_size, spec.stride, spec.padding
    C, H, W = x.shape
    out_h = spec.output_size(H)
    out_w = spec.output_size(W)

    img = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)), mode="constant", constant_values=-np.inf)
    patches = np.stack([
        img[:, ky:ky + stride * out_h:stride, kx:kx + stride * out_w:stride]
        for ky in range(k) for kx in range(k)
    ])
    argmax = patches.argmax(axis=0)
    out = np.take_along_axis(patches, argmax[None], axis=0)[0]

    def _backward(node, grad):
        arg = node.saved["argmax"]
        rows = arg // k + stride * np.arange(out_h)[None, :, None]
        cols = arg % k + stride * np.arange(out_w)[None, None, :]
        channels = np.broadcast_to(np.arange(C)[:, None, None], arg.shape)
        padded = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=grad.dtype)
        np.add.at(padded, (channels, rows, cols), grad)
        return (padded[:, pad:pad + H, pad:pad + W],)

    return Tensor.from_op(out, "maxpool2d", (x,), _backward, argmax=argmax)


@dataclass(eq=False)
class ConvLayer:
    """A convolution layer with its parameters."""
    name: str
    spec: ConvSpec
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_forward(x, self.weight, self.bias, self.spec)


def conv_block(x: Tensor, layers: Sequence[ConvLayer], pool: Optional[PoolSpec] = None) -> Tensor:
    """Each conv followed by ReLU, then the optional pool."""
    if not layers:
        raise ShapeError("conv_block needs at least one conv layer")
    for layer in layers:
        x = layer(x).relu()
    if pool is not None:
        x = maxpool2d(x, pool)
    return x
