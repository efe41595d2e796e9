"""
Dense tensors and the forward-pass kernels of the detector.

All inference math is float32. Convolution accumulates every output element
in a fixed order (input channel, then kernel row, then kernel column) so the
result is bit-identical no matter how the output channels are split across
worker threads.
"""
import math
from concurrent.futures import ThreadPoolExecutor, Executor
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from errors import ConfigurationError, PreconditionError


@dataclass(frozen=True)
class Tensor:
    """Feature map of shape (channels, height, width), stored flat and read-only."""
    channels: int
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigurationError(
                f"Tensor dimensions must be positive, got {self.shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != self.channels * self.height * self.width:
            raise ConfigurationError(
                f"Tensor data length {data.size} does not match shape {self.shape}")
        data.flags.writeable = False
        object.__setattr__(self, 'data', data)

    @classmethod
    def from_array(cls, array: np.ndarray) -> 'Tensor':
        array = np.asarray(array, dtype=np.float32)
        if array.ndim != 3:
            raise ConfigurationError(f"Expected a 3-D array, got {array.ndim} dimensions")
        c, h, w = array.shape
        return cls(c, h, w, array.copy())

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> 'Tensor':
        return cls(channels, height, width, np.zeros(channels * height * width, np.float32))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def array(self) -> np.ndarray:
        """Read-only (C, H, W) view of the data."""
        return self.data.reshape(self.shape)


@dataclass(frozen=True)
class BatchNorm:
    scales: np.ndarray
    rolling_mean: np.ndarray
    rolling_variance: np.ndarray
    epsilon: float = 1e-6


@dataclass(frozen=True)
class ConvKernel:
    out_channels: int
    in_channels: int
    kernel_size: int
    stride: int
    pad: int
    weights: np.ndarray
    bias: np.ndarray
    batch_norm: Optional[BatchNorm] = None

    def __post_init__(self):
        if self.kernel_size not in (1, 3):
            raise ConfigurationError(f"Kernel size must be 1 or 3, got {self.kernel_size}")
        if self.stride < 1 or self.pad < 0:
            raise ConfigurationError(f"Invalid stride {self.stride} / pad {self.pad}")

        expected = self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
        weights = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        if weights.size != expected:
            raise ConfigurationError(
                f"Kernel weights length {weights.size} != {self.out_channels}x{self.in_channels}"
                f"x{self.kernel_size}x{self.kernel_size}")
        bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if bias.size != self.out_channels:
            raise ConfigurationError(f"Bias length {bias.size} != {self.out_channels}")
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'bias', bias)

        bn = self.batch_norm
        if bn is not None:
            fields = {}
            for name in ('scales', 'rolling_mean', 'rolling_variance'):
                values = np.asarray(getattr(bn, name), dtype=np.float32).reshape(-1)
                if values.size != self.out_channels:
                    raise ConfigurationError(f"Batch-norm {name} length {values.size} != {self.out_channels}")
                fields[name] = values
            if np.any(fields['rolling_variance'] <= -bn.epsilon):
                raise ConfigurationError("Batch-norm variance must exceed -epsilon")
            object.__setattr__(self, 'batch_norm', replace(bn, **fields))

    @property
    def weight_array(self) -> np.ndarray:
        return self.weights.reshape(self.out_channels, self.in_channels,
                                    self.kernel_size, self.kernel_size)


def conv_output_size(size: int, kernel_size: int, stride: int, pad: int) -> int:
    """Output extent of a convolution; raises when it is not a positive integer."""
    span = size + 2 * pad - kernel_size
    if span < 0 or span % stride != 0:
        raise ConfigurationError(
            f"Convolution of extent {size} with K={kernel_size}, stride={stride}, pad={pad} "
            f"does not give an integer output size")
    return span // stride + 1


def pool_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def _check_conv(input: Tensor, kernel: ConvKernel) -> Tuple[int, int]:
    if input.channels != kernel.in_channels:
        raise ConfigurationError(
            f"Convolution expects {kernel.in_channels} input channels, got {input.channels}")
    out_h = conv_output_size(input.height, kernel.kernel_size, kernel.stride, kernel.pad)
    out_w = conv_output_size(input.width, kernel.kernel_size, kernel.stride, kernel.pad)
    return out_h, out_w


def _conv_channels(padded: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   stride: int, out_h: int, out_w: int) -> np.ndarray:
    out_channels, in_channels, k, _ = weights.shape
    acc = np.zeros((out_channels, out_h, out_w), dtype=np.float32)
    tap = np.empty_like(acc)
    row_end = stride * (out_h - 1) + 1
    col_end = stride * (out_w - 1) + 1
    for c in range(in_channels):
        for i in range(k):
            for j in range(k):
                window = padded[c, i:i + row_end:stride, j:j + col_end:stride]
                np.multiply(weights[:, c, i, j, None, None], window, out=tap)
                acc += tap
    acc += bias[:, None, None]
    return acc


def conv2d(input: Tensor, kernel: ConvKernel, threads: int = 1,
           executor: Optional[Executor] = None) -> Tensor:
    """Zero-padded 2-D convolution; output channels may be split over a thread pool."""
    out_h, out_w = _check_conv(input, kernel)
    x = input.array
    if kernel.pad:
        p = kernel.pad
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    weights = kernel.weight_array

    chunks = [c for c in np.array_split(np.arange(kernel.out_channels), max(1, threads)) if c.size]
    if len(chunks) == 1:
        out = _conv_channels(x, weights, kernel.bias, kernel.stride, out_h, out_w)
        return Tensor(kernel.out_channels, out_h, out_w, out)

    def run(chunk: np.ndarray) -> np.ndarray:
        lo, hi = int(chunk[0]), int(chunk[-1]) + 1
        return _conv_channels(x, weights[lo:hi], kernel.bias[lo:hi], kernel.stride, out_h, out_w)

    if executor is None:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = list(executor.map(run, chunks))
    return Tensor(kernel.out_channels, out_h, out_w, np.concatenate(parts, axis=0))


def conv2d_reference(input: Tensor, kernel: ConvKernel) -> Tensor:
    """Direct convolution, one output position at a time. Test oracle."""
    out_h, out_w = _check_conv(input, kernel)
    k, s, p = kernel.kernel_size, kernel.stride, kernel.pad
    x = np.pad(input.array.astype(np.float64), ((0, 0), (p, p), (p, p)))
    w = kernel.weight_array.astype(np.float64)
    out = np.empty((kernel.out_channels, out_h, out_w), dtype=np.float64)
    for y in range(out_h):
        for xo in range(out_w):
            window = x[:, y * s:y * s + k, xo * s:xo * s + k]
            for o in range(kernel.out_channels):
                out[o, y, xo] = kernel.bias[o] + np.sum(w[o] * window)
    return Tensor.from_array(out)


def maxpool2d(input: Tensor, size: int, stride: int) -> Tensor:
    """Sliding-window max; windows overrunning the bottom/right edge see -inf."""
    if size < 1 or stride < 1:
        raise PreconditionError(f"Pool size and stride must be >= 1, got {size}/{stride}")
    out_h = pool_output_size(input.height, stride)
    out_w = pool_output_size(input.width, stride)
    pad_h = max(0, (out_h - 1) * stride + size - input.height)
    pad_w = max(0, (out_w - 1) * stride + size - input.width)
    x = np.pad(input.array, ((0, 0), (0, pad_h), (0, pad_w)), constant_values=-np.inf)

    out = np.full((input.channels, out_h, out_w), -np.inf, dtype=np.float32)
    row_end = stride * (out_h - 1) + 1
    col_end = stride * (out_w - 1) + 1
    for i in range(size):
        for j in range(size):
            np.maximum(out, x[:, i:i + row_end:stride, j:j + col_end:stride], out=out)
    return Tensor(input.channels, out_h, out_w, out)


def maxpool2d_reference(input: Tensor, size: int, stride: int) -> Tensor:
    """Windowed max with windows clamped to the valid region. Test oracle."""
    x = input.array
    out_h = pool_output_size(input.height, stride)
    out_w = pool_output_size(input.width, stride)
    out = np.empty((input.channels, out_h, out_w), dtype=np.float32)
    for c in range(input.channels):
        for y in range(out_h):
            for xo in range(out_w):
                window = x[c, y * stride:min(y * stride + size, input.height),
                           xo * stride:min(xo * stride + size, input.width)]
                out[c, y, xo] = window.max()
    return Tensor.from_array(out)


def leaky_relu(t: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise PreconditionError(f"alpha must lie in [0, 1), got {alpha}")
    x = t.array
    out = np.where(x >= 0, x, x * np.float32(alpha))
    return Tensor(t.channels, t.height, t.width, out)


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logistic_array(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def fold_batch_norm(kernel: ConvKernel) -> ConvKernel:
    """Absorb inference-time batch-norm statistics into weights and bias."""
    bn = kernel.batch_norm
    if bn is None:
        raise PreconditionError("fold_batch_norm requires a kernel with batch_norm")
    scale = bn.scales.astype(np.float64) / np.sqrt(bn.rolling_variance.astype(np.float64) + bn.epsilon)
    weights = kernel.weight_array.astype(np.float64) * scale[:, None, None, None]
    bias = (kernel.bias.astype(np.float64) - bn.rolling_mean) * scale
    return replace(kernel, weights=weights.astype(np.float32).reshape(-1),
                   bias=bias.astype(np.float32), batch_norm=None)
