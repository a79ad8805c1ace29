"""Dense tensor kernels used by the autoencoder.

Tensors are plain ``numpy.ndarray`` objects in NCHW order. Only the handful of
differentiable operations the network needs are provided, each as a forward
function plus an explicit backward function; there is no graph engine.

All convolutions use 3x3 kernels with zero padding of one pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError

KERNEL_SIZE = 3
PADDING = 1


@dataclass
class ConvLayerParams:
    """Kernels are always stored as (out_channels, in_channels, 3, 3).

    For a transposed layer ``out_channels`` is the number of channels the
    layer produces, so the same record describes both directions.
    """

    kernels: np.ndarray
    bias: np.ndarray
    prelu_slope: np.ndarray
    stride: int = 1
    padding: int = PADDING

    def __post_init__(self):
        if self.padding != PADDING:
            raise ShapeError(f"padding must be {PADDING}, got {self.padding}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        k = self.kernels
        if k.ndim != 4 or k.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
            raise ShapeError(f"kernels must be (out, in, 3, 3), got {k.shape}")
        if self.bias.shape != (k.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({k.shape[0]},)")
        if self.prelu_slope.shape != (k.shape[0],):
            raise ShapeError(
                f"prelu_slope shape {self.prelu_slope.shape} != ({k.shape[0]},)"
            )

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @classmethod
    def initialize(cls, in_channels, out_channels, stride, rng, dtype=np.float64):
        """He-normal kernels, zero bias, PReLU slopes of 0.25."""
        std = np.sqrt(2.0 / (in_channels * KERNEL_SIZE * KERNEL_SIZE))
        kernels = rng.normal(
            0.0, std, size=(out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE)
        ).astype(dtype)
        return cls(
            kernels=kernels,
            bias=np.zeros(out_channels, dtype=dtype),
            prelu_slope=np.full(out_channels, 0.25, dtype=dtype),
            stride=stride,
        )


def conv_output_size(size: int, stride: int) -> int:
    return (size + 2 * PADDING - KERNEL_SIZE) // stride + 1


def transposed_output_size(size: int, stride: int) -> int:
    # output_padding of 1 for stride 2 so that up(down(x)) keeps even extents
    output_padding = 1 if stride == 2 else 0
    return (size - 1) * stride - 2 * PADDING + KERNEL_SIZE + output_padding


def _check_input(x, in_channels, what):
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-D (B, C, H, W) input, got shape {x.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(
            f"{what}: input has {x.shape[1]} channels, kernel expects {in_channels}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"{what}: empty spatial extent {x.shape[2:]}")


def _im2col(x, stride, out_h, out_w):
    """Strided 3x3 windows of the zero-padded input: (B, C, 3, 3, out_h, out_w)."""
    xp = np.pad(x, ((0, 0), (0, 0), (PADDING, PADDING), (PADDING, PADDING)))
    b, c = x.shape[:2]
    cols = np.empty((b, c, KERNEL_SIZE, KERNEL_SIZE, out_h, out_w), dtype=x.dtype)
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    return cols


def _col2im(cols, height, width, stride):
    """Adjoint of ``_im2col``: scatter-add windows back onto an (H, W) grid."""
    b, c, _, _, out_h, out_w = cols.shape
    xp = np.zeros((b, c, height + 2 * PADDING, width + 2 * PADDING), dtype=cols.dtype)
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            xp[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ] += cols[:, :, i, j]
    return xp[:, :, PADDING : PADDING + height, PADDING : PADDING + width]


def _correlate(x, kernels, stride):
    out_h = conv_output_size(x.shape[2], stride)
    out_w = conv_output_size(x.shape[3], stride)
    cols = _im2col(x, stride, out_h, out_w)
    out = np.tensordot(cols, kernels, axes=([1, 2, 3], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2), cols


def _correlate_adjoint(g, kernels, stride, height, width):
    grad_cols = np.tensordot(kernels, g, axes=([0], [1]))
    return _col2im(grad_cols.transpose(3, 0, 1, 2, 4, 5), height, width, stride)


def conv2d(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation plus per-channel bias (no activation)."""
    _check_input(x, params.in_channels, "conv2d")
    out, _ = _correlate(x, params.kernels, params.stride)
    return out + params.bias[None, :, None, None]


def conv2d_backward(x, params: ConvLayerParams, grad_output):
    """Returns ``(grad_input, grad_kernels, grad_bias)`` for :func:`conv2d`."""
    _check_input(x, params.in_channels, "conv2d_backward")
    s = params.stride
    expected = (
        x.shape[0],
        params.out_channels,
        conv_output_size(x.shape[2], s),
        conv_output_size(x.shape[3], s),
    )
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output shape {grad_output.shape} != {expected}")
    cols = _im2col(x, s, expected[2], expected[3])
    grad_kernels = np.tensordot(grad_output, cols, axes=([0, 2, 3], [0, 4, 5]))
    grad_bias = grad_output.sum(axis=(0, 2, 3))
    grad_input = _correlate_adjoint(
        grad_output, params.kernels, s, x.shape[2], x.shape[3]
    )
    return grad_input, grad_kernels, grad_bias


def transposed_conv2d(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Transposed convolution ("deconvolution") plus per-channel bias.

    Without bias this is the exact adjoint of :func:`conv2d` run with kernels
    ``params.kernels.swapaxes(0, 1)`` and the same stride.
    """
    _check_input(x, params.in_channels, "transposed_conv2d")
    s = params.stride
    height = transposed_output_size(x.shape[2], s)
    width = transposed_output_size(x.shape[3], s)
    out = _correlate_adjoint(x, params.kernels.swapaxes(0, 1), s, height, width)
    return out + params.bias[None, :, None, None]


def transposed_conv2d_backward(x, params: ConvLayerParams, grad_output):
    """Returns ``(grad_input, grad_kernels, grad_bias)`` for :func:`transposed_conv2d`."""
    _check_input(x, params.in_channels, "transposed_conv2d_backward")
    s = params.stride
    expected = (
        x.shape[0],
        params.out_channels,
        transposed_output_size(x.shape[2], s),
        transposed_output_size(x.shape[3], s),
    )
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output shape {grad_output.shape} != {expected}")
    conv_kernels = params.kernels.swapaxes(0, 1)
    grad_input, cols = _correlate(grad_output, conv_kernels, s)
    # the forward map is linear in the kernels with the roles of x and g swapped
    grad_conv = np.tensordot(x, cols, axes=([0, 2, 3], [0, 4, 5]))
    grad_kernels = grad_conv.swapaxes(0, 1)
    grad_bias = grad_output.sum(axis=(0, 2, 3))
    return grad_input, grad_kernels, grad_bias


def _check_slope(x, slope):
    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise ShapeError(
            f"prelu slope shape {slope.shape} does not match channels of {x.shape}"
        )


def _per_channel(slope, ndim):
    return slope.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    _check_slope(x, slope)
    return np.where(x >= 0, x, _per_channel(slope, x.ndim) * x)


def prelu_backward(x, slope, grad_output):
    """Returns ``(grad_input, grad_slope)``."""
    _check_slope(x, slope)
    if grad_output.shape != x.shape:
        raise ShapeError(f"grad_output shape {grad_output.shape} != {x.shape}")
    negative = x < 0
    grad_input = np.where(negative, _per_channel(slope, x.ndim) * grad_output, grad_output)
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    grad_slope = np.where(negative, grad_output * x, 0.0).sum(axis=reduce_axes)
    return grad_input, grad_slope


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **hyper):
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, name: str = "param"):
    """One bias-corrected Adam update. Mutates ``state``; returns the new parameter."""
    if grad.shape != param.shape or state.first_moment.shape != param.shape:
        raise ShapeError(
            f"{name}: gradient {grad.shape} / moments {state.first_moment.shape} "
            f"do not match parameter {param.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for parameter {name!r}", name=name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    state.first_moment = b1 * state.first_moment + (1.0 - b1) * grad
    state.second_moment = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = state.first_moment / (1.0 - b1**t)
    v_hat = state.second_moment / (1.0 - b2**t)
    return param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def mean_square(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mean_square_backward(x: np.ndarray) -> np.ndarray:
    return 2.0 * x / x.size
