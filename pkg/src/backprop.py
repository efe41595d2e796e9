"""
Float64 forward and backward passes over a batch-norm-free network, for toy
training and gradient checks. Convolution goes through im2col so the weight
gradient is a single matrix product.
"""
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from errors import PreconditionError
from network_config import Convolutional, MaxPool, NetworkConfig
from tensor_ops import ConvKernel, pool_output_size
from weights_manager import Model

LEAKY_ALPHA = 0.1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """(C, H, W) -> (C*k*k, H'*W') patch matrix, rows ordered by channel then tap."""
    c, h, w = x.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, out_h, out_w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]
    return cols.reshape(c * k * k, out_h * out_w), out_h, out_w


def col2im(cols: np.ndarray, shape: Tuple[int, int, int], k: int, stride: int, pad: int,
           out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch gradients back onto the input."""
    c, h, w = shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, out_h, out_w)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += cols[:, i, j]
    return xp[:, pad:pad + h, pad:pad + w] if pad else xp


@dataclass
class ConvParams:
    weights: np.ndarray  # (O, C, K, K)
    bias: np.ndarray
    stride: int
    pad: int
    activation: str


class TrainableNet:
    """A Model's convolutions as mutable float64 arrays, with cached activations for backward."""

    def __init__(self, model: Model):
        self.config = model.config.without_batch_norm()
        kernels = model.inference_kernels()
        self.params: Dict[int, ConvParams] = {}
        for index, layer in model.config.conv_layers():
            kernel = kernels[index]
            self.params[index] = ConvParams(kernel.weight_array.astype(np.float64),
                                            kernel.bias.astype(np.float64),
                                            kernel.stride, kernel.pad, layer.activation)
        self._cache: List[tuple] = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.config.input_shape:
            raise PreconditionError(f"Input shape {x.shape} does not match {self.config.input_shape}")
        self._cache = []
        for index, layer in enumerate(self.config.layers):
            if isinstance(layer, Convolutional):
                p = self.params[index]
                o, _, k, _ = p.weights.shape
                cols, out_h, out_w = im2col(x, k, p.stride, p.pad)
                z = (p.weights.reshape(o, -1) @ cols + p.bias[:, None]).reshape(o, out_h, out_w)
                self._cache.append(('conv', index, x.shape, cols, z))
                x = np.where(z >= 0, z, LEAKY_ALPHA * z) if p.activation == 'leaky' else z
            elif isinstance(layer, MaxPool):
                x, argmax = _maxpool_forward(x, layer.size, layer.stride)
                self._cache.append(('pool', layer, x.shape, argmax, None))
        return x

    def backward(self, grad: np.ndarray) -> Tuple[Dict[int, Tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Gradients {layer: (d_weights, d_bias)} and d_input for the last forward call."""
        grads = {}
        for kind, key, in_shape, saved, z in reversed(self._cache):
            if kind == 'conv':
                p = self.params[key]
                if p.activation == 'leaky':
                    grad = np.where(z >= 0, grad, LEAKY_ALPHA * grad)
                o, _, k, _ = p.weights.shape
                g = grad.reshape(o, -1)
                grads[key] = ((g @ saved.T).reshape(p.weights.shape), g.sum(axis=1))
                dcols = p.weights.reshape(o, -1).T @ g
                grad = col2im(dcols, in_shape, k, p.stride, p.pad, z.shape[1], z.shape[2])
            else:
                grad = _maxpool_backward(grad, saved, key.size, key.stride)
        return grads, grad

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([np.concatenate([p.weights.ravel(), p.bias]) for p in self.params.values()])

    def set_flat_parameters(self, vector: np.ndarray):
        pos = 0
        for p in self.params.values():
            n = p.weights.size
            p.weights = vector[pos:pos + n].reshape(p.weights.shape).copy()
            pos += n
            p.bias = vector[pos:pos + p.bias.size].copy()
            pos += p.bias.size
        if pos != vector.size:
            raise PreconditionError(f"Parameter vector has {vector.size} values, network needs {pos}")

    @staticmethod
    def flatten_gradients(grads: Dict[int, Tuple[np.ndarray, np.ndarray]], order) -> np.ndarray:
        return np.concatenate([np.concatenate([grads[i][0].ravel(), grads[i][1]]) for i in order])

    def to_model(self, seen: int = 0) -> Model:
        kernels = {}
        for index, p in self.params.items():
            o, c, k, _ = p.weights.shape
            kernels[index] = ConvKernel(o, c, k, p.stride, p.pad, p.weights.astype(np.float32).reshape(-1),
                                        p.bias.astype(np.float32))
        return Model(self.config, kernels, seen)


def _pool_windows(x: np.ndarray, size: int, stride: int):
    c, h, w = x.shape
    out_h, out_w = pool_output_size(h, stride), pool_output_size(w, stride)
    pad_h = max(0, (out_h - 1) * stride + size - h)
    pad_w = max(0, (out_w - 1) * stride + size - w)
    xp = np.pad(x, ((0, 0), (0, pad_h), (0, pad_w)), constant_values=-np.inf)
    return xp, out_h, out_w


def _maxpool_forward(x: np.ndarray, size: int, stride: int):
    xp, out_h, out_w = _pool_windows(x, size, stride)
    windows = np.stack([xp[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]
                        for i in range(size) for j in range(size)])
    argmax = windows.argmax(axis=0)
    out = np.take_along_axis(windows, argmax[None], axis=0)[0]
    return out, (argmax, x.shape)


def _maxpool_backward(grad: np.ndarray, saved, size: int, stride: int) -> np.ndarray:
    argmax, in_shape = saved
    c, h, w = in_shape
    _, out_h, out_w = grad.shape
    xp, _, _ = _pool_windows(np.zeros(in_shape), size, stride)
    dxp = np.zeros_like(xp)
    for i in range(size):
        for j in range(size):
            routed = np.where(argmax == i * size + j, grad, 0.0)
            dxp[:, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += routed
    return dxp[:, :h, :w]


def random_trainable(config: NetworkConfig, seed: int = 0, scale: float = 0.5) -> TrainableNet:
    """Normal-initialised net with nonzero biases, for gradient checks."""
    rng = np.random.default_rng(seed)
    config = config.without_batch_norm()
    kernels = {}
    for index, layer in config.conv_layers():
        c = config.shapes[index - 1][0]
        n = layer.filters * c * layer.size * layer.size
        kernels[index] = ConvKernel(layer.filters, c, layer.size, layer.stride, layer.padding,
                                    rng.normal(0.0, scale, n).astype(np.float32),
                                    rng.normal(0.0, scale, layer.filters).astype(np.float32))
    return TrainableNet(Model(config, kernels))
