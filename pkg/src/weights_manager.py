"""
Binary weights, little-endian:

    int32 major, int32 minor, int32 revision
    seen: uint64 if major * 10 + minor >= 2 else uint32
    for each convolutional layer, in network order (float32):
        bias[n]
        scales[n], rolling_mean[n], rolling_variance[n]   (batch-normalized layers only)
        weights[n * c * k * k]

The writer always emits header (0, 2, 0) with a 64-bit seen field.
"""
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ConfigurationError, WeightsFormatError
from logging_manager import get_logger
from network_config import Convolutional, NetworkConfig
from tensor_ops import BatchNorm, ConvKernel, fold_batch_norm

logger = get_logger('weights')

WRITE_VERSION = (0, 2, 0)
BN_EPSILON = 1e-6


@dataclass
class Model:
    config: NetworkConfig
    kernels: Dict[int, ConvKernel]
    seen: int = 0
    _folded: Optional[Dict[int, ConvKernel]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.kernels = dict(self.kernels)
        for index, layer in self.config.conv_layers():
            if index not in self.kernels:
                raise ConfigurationError(f"Model is missing the kernel of layer {index}")
            self._check_kernel(index, layer, self.kernels[index])
        extra = set(self.kernels) - {index for index, _ in self.config.conv_layers()}
        if extra:
            raise ConfigurationError(f"Kernels given for non-convolutional layers {sorted(extra)}")

    def _check_kernel(self, index: int, layer: Convolutional, kernel: ConvKernel):
        in_channels = self.config.shapes[index - 1][0]
        expected = (layer.filters, in_channels, layer.size, layer.stride, layer.padding,
                    layer.batch_normalize)
        actual = (kernel.out_channels, kernel.in_channels, kernel.kernel_size, kernel.stride, kernel.pad,
                  kernel.batch_norm is not None)
        if expected != actual:
            raise ConfigurationError(
                f"Layer {index}: kernel (out, in, k, stride, pad, bn) = {actual} does not match config {expected}")

    def set_kernel(self, index: int, kernel: ConvKernel):
        self._check_kernel(index, self.config.layers[index], kernel)
        self.kernels[index] = kernel
        self._folded = None

    def inference_kernels(self) -> Dict[int, ConvKernel]:
        """Kernels with batch norm folded in, computed once per weight update."""
        if self._folded is None:
            self._folded = {index: fold_batch_norm(k) if k.batch_norm is not None else k
                            for index, k in self.kernels.items()}
        return self._folded

    def parameter_count(self) -> int:
        total = 0
        for kernel in self.kernels.values():
            total += kernel.weights.size + kernel.bias.size
            if kernel.batch_norm is not None:
                total += 3 * kernel.out_channels
        return total


def _layer_float_counts(config: NetworkConfig) -> List[Tuple[int, Convolutional, int, int]]:
    counts = []
    for index, layer in config.conv_layers():
        in_channels = config.shapes[index - 1][0]
        n = layer.filters
        count = n + (3 * n if layer.batch_normalize else 0) + n * in_channels * layer.size * layer.size
        counts.append((index, layer, in_channels, count))
    return counts


def load_weights(data: bytes, config: NetworkConfig) -> Model:
    """Decode a weights stream for the given configuration."""
    if len(data) < 12:
        raise WeightsFormatError(f"Weights stream too short for header: {len(data)} bytes")
    major, minor, revision = (int(v) for v in np.frombuffer(data, dtype='<i4', count=3))
    if major * 10 + minor >= 2:
        if len(data) < 20:
            raise WeightsFormatError("Weights stream truncated inside the 64-bit 'seen' field")
        seen = int(np.frombuffer(data, dtype='<u8', count=1, offset=12)[0])
        offset = 20
    else:
        if len(data) < 16:
            raise WeightsFormatError("Weights stream truncated inside the 32-bit 'seen' field")
        seen = int(np.frombuffer(data, dtype='<u4', count=1, offset=12)[0])
        offset = 16

    body = len(data) - offset
    available = body // 4
    layers = _layer_float_counts(config)
    expected_total = sum(count for *_, count in layers)
    trailing = body - 4 * expected_total
    if trailing > 0:
        raise WeightsFormatError(
            f"Weights stream has {trailing} trailing bytes after {expected_total} floats")
    floats = np.frombuffer(data, dtype='<f4', count=available, offset=offset)

    kernels: Dict[int, ConvKernel] = {}
    pos = 0
    for index, layer, in_channels, count in layers:
        if pos + count > available:
            raise WeightsFormatError(
                f"Weights stream truncated at layer {index}: expected {expected_total} floats, "
                f"got {available}")
        n = layer.filters

        def take(size: int) -> np.ndarray:
            nonlocal pos
            chunk = floats[pos:pos + size].astype(np.float32)
            pos += size
            return chunk

        bias = take(n)
        batch_norm = None
        if layer.batch_normalize:
            batch_norm = BatchNorm(scales=take(n), rolling_mean=take(n), rolling_variance=take(n),
                                   epsilon=BN_EPSILON)
        weights = take(n * in_channels * layer.size * layer.size)
        kernels[index] = ConvKernel(n, in_channels, layer.size, layer.stride, layer.padding,
                                    weights, bias, batch_norm)

    logger.debug(f"Loaded weights v{major}.{minor}.{revision}, seen={seen}, {expected_total} floats")
    return Model(config, kernels, seen)


def save_weights(model: Model) -> bytes:
    parts = [np.array(WRITE_VERSION, dtype='<i4').tobytes(), np.array([model.seen], dtype='<u8').tobytes()]
    for index, _ in model.config.conv_layers():
        kernel = model.kernels[index]
        parts.append(kernel.bias.astype('<f4').tobytes())
        if kernel.batch_norm is not None:
            bn = kernel.batch_norm
            for values in (bn.scales, bn.rolling_mean, bn.rolling_variance):
                parts.append(values.astype('<f4').tobytes())
        parts.append(kernel.weights.astype('<f4').tobytes())
    return b''.join(parts)


def read_weights_file(path: str, config: NetworkConfig) -> Model:
    if not os.path.exists(path):
        raise WeightsFormatError(f"Weights file not found: {path}")
    with open(path, 'rb') as file:
        return load_weights(file.read(), config)


def write_weights_file(model: Model, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as file:
        file.write(save_weights(model))


def init_random_weights(config: NetworkConfig, seed: int = 42, scale: float = 0.05) -> Model:
    """Uniform [-scale, scale] weights and biases; batch norm set to identity statistics."""
    rng = np.random.default_rng(seed)
    kernels = {}
    for index, layer, in_channels, _ in _layer_float_counts(config):
        n = layer.filters
        weights = rng.uniform(-scale, scale, n * in_channels * layer.size * layer.size).astype(np.float32)
        bias = rng.uniform(-scale, scale, n).astype(np.float32)
        batch_norm = None
        if layer.batch_normalize:
            batch_norm = BatchNorm(np.ones(n, np.float32), np.zeros(n, np.float32), np.ones(n, np.float32),
                                   BN_EPSILON)
        kernels[index] = ConvKernel(n, in_channels, layer.size, layer.stride, layer.padding,
                                    weights, bias, batch_norm)
    return Model(config, kernels)


def init_toy_model(config: NetworkConfig, seed: int = 0) -> Model:
    """He-scaled weights, zero biases and a zero detection head, for toy training.

    A zero head decodes every anchor to its prior centred in its cell, so training
    starts from boxes of a known size.
    """
    config = config.without_batch_norm()
    rng = np.random.default_rng(seed)
    conv_layers = _layer_float_counts(config)
    head_index = conv_layers[-1][0]
    kernels = {}
    for index, layer, in_channels, _ in conv_layers:
        n = layer.filters
        fan_in = in_channels * layer.size * layer.size
        if index == head_index:
            weights = np.zeros(n * fan_in, np.float32)
        else:
            weights = (rng.standard_normal(n * fan_in) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        kernels[index] = ConvKernel(n, in_channels, layer.size, layer.stride, layer.padding,
                                    weights, np.zeros(n, np.float32))
    return Model(config, kernels)
