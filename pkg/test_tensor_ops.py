#!/usr/bin/env python3
"""
Tests for the tensor kernels: convolution, pooling, activations, batch-norm folding
"""

import sys
import os

import numpy as np
import pytest

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from errors import ConfigurationError, PreconditionError
from tensor_ops import (BatchNorm, ConvKernel, Tensor, conv2d, conv2d_reference, fold_batch_norm, leaky_relu,
                        logistic, maxpool2d, maxpool2d_reference)


def _random_kernel(rng, out_c, in_c, k, stride=1, pad=None, bias=True, batch_norm=None, scale=1.0):
    pad = k // 2 if pad is None else pad
    weights = rng.normal(0.0, scale, out_c * in_c * k * k)
    b = rng.normal(0.0, 1.0, out_c) if bias else np.zeros(out_c)
    return ConvKernel(out_c, in_c, k, stride, pad, weights, b, batch_norm)


def test_identity_convolution():
    rng = np.random.default_rng(0)
    x = Tensor.from_array(rng.normal(size=(3, 5, 7)))
    kernel = ConvKernel(3, 3, 1, 1, 0, np.eye(3).reshape(-1), np.zeros(3))
    assert np.array_equal(conv2d(x, kernel).data, x.data)


def test_all_ones_kernel_on_constant_input():
    c = 2.5
    x = Tensor.from_array(np.full((1, 5, 5), c))
    kernel = ConvKernel(1, 1, 3, 1, 1, np.ones(9), np.zeros(1))
    out = conv2d(x, kernel).array[0]
    assert out[2, 2] == pytest.approx(9 * c)
    assert out[0, 0] == pytest.approx(4 * c)
    assert out[4, 4] == pytest.approx(4 * c)
    assert out[0, 2] == pytest.approx(6 * c)


def test_conv_matches_direct_oracle_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        c, h, w = int(rng.integers(1, 9)), int(rng.integers(3, 17)), int(rng.integers(3, 17))
        k = int(rng.choice([1, 3]))
        stride = 1 if k == 1 else int(rng.choice([1, 1, 2]))
        pad = k // 2
        if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
            stride = 1
        kernel = _random_kernel(rng, int(rng.integers(1, 9)), c, k, stride, pad, scale=0.3)
        x = Tensor.from_array(rng.uniform(-1.0, 1.0, size=(c, h, w)))
        diff = np.abs(conv2d(x, kernel).array - conv2d_reference(x, kernel).array).max()
        assert diff < 1e-5


def test_conv_is_linear_for_zero_bias():
    rng = np.random.default_rng(2)
    kernel = _random_kernel(rng, 4, 3, 3, bias=False)
    x = rng.normal(size=(3, 8, 8))
    y = rng.normal(size=(3, 8, 8))
    a, b = 1.7, -0.4
    lhs = conv2d(Tensor.from_array(a * x + b * y), kernel).array
    rhs = a * conv2d(Tensor.from_array(x), kernel).array + b * conv2d(Tensor.from_array(y), kernel).array
    assert np.abs(lhs - rhs).max() < 1e-4


def test_conv_bit_identical_across_thread_counts():
    rng = np.random.default_rng(3)
    kernel = _random_kernel(rng, 13, 5, 3)
    x = Tensor.from_array(rng.normal(size=(5, 16, 16)))
    single = conv2d(x, kernel, threads=1).data
    for threads in (2, 3, 4, 8):
        assert np.array_equal(conv2d(x, kernel, threads=threads).data, single)


def test_conv_channel_mismatch_is_configuration_error():
    rng = np.random.default_rng(4)
    kernel = _random_kernel(rng, 2, 3, 3)
    with pytest.raises(ConfigurationError):
        conv2d(Tensor.zeros(4, 5, 5), kernel)


def test_conv_non_integer_output_is_configuration_error():
    rng = np.random.default_rng(5)
    kernel = _random_kernel(rng, 2, 1, 3, stride=2, pad=0)
    with pytest.raises(ConfigurationError):
        conv2d(Tensor.zeros(1, 6, 6), kernel)


def test_maxpool_analytic_example():
    x = Tensor.from_array(np.arange(1, 17, dtype=np.float32).reshape(1, 4, 4))
    out = maxpool2d(x, 2, 2)
    assert out.shape == (1, 2, 2)
    assert out.array[0].tolist() == [[6, 8], [14, 16]]


def test_maxpool_constant_and_degenerate_inputs():
    out = maxpool2d(Tensor.from_array(np.full((2, 6, 6), 3.0)), 2, 2)
    assert out.shape == (2, 3, 3)
    assert np.all(out.data == 3.0)
    single = maxpool2d(Tensor.from_array(np.full((1, 1, 1), -2.0)), 2, 2)
    assert single.shape == (1, 1, 1)
    assert single.data[0] == -2.0


def test_maxpool_odd_input_matches_clamped_oracle():
    rng = np.random.default_rng(6)
    x = Tensor.from_array(rng.normal(size=(3, 9, 9)))
    out = maxpool2d(x, 2, 2)
    assert out.shape == (3, 5, 5)
    assert np.array_equal(out.data, maxpool2d_reference(x, 2, 2).data)


def test_maxpool_random_instances_match_oracle_and_copy_inputs():
    rng = np.random.default_rng(7)
    for _ in range(200):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17)))
        size, stride = [(2, 2), (2, 1), (3, 2), (1, 1)][int(rng.integers(0, 4))]
        x = Tensor.from_array(rng.normal(size=shape))
        out = maxpool2d(x, size, stride)
        assert np.array_equal(out.data, maxpool2d_reference(x, size, stride).data)
        assert np.all(np.isin(out.data, x.data))


def test_maxpool_rejects_invalid_window():
    with pytest.raises(PreconditionError):
        maxpool2d(Tensor.zeros(1, 4, 4), 0, 2)


def test_leaky_relu():
    x = Tensor.from_array(np.array([[[2.0, -1.0, 0.0, 3.5]]]))
    out = leaky_relu(x, 0.1).array[0, 0]
    assert out[0] == 2.0
    assert out[1] == pytest.approx(-0.1)
    assert out[2] == 0.0
    positive = Tensor.from_array(np.abs(np.random.default_rng(8).normal(size=(2, 3, 3))))
    assert np.array_equal(leaky_relu(leaky_relu(positive)).data, leaky_relu(positive).data)
    with pytest.raises(PreconditionError):
        leaky_relu(x, 1.0)


def test_logistic():
    assert logistic(0.0) == 0.5
    assert 1 - 1e-10 < logistic(100.0) <= 1.0
    assert logistic(-100.0) >= 0.0
    rng = np.random.default_rng(9)
    for x in rng.normal(0.0, 10.0, 200):
        assert logistic(-x) == pytest.approx(1.0 - logistic(x), abs=1e-7)


def test_fold_identity_and_doubling():
    rng = np.random.default_rng(10)
    base = _random_kernel(rng, 3, 2, 3)
    identity = BatchNorm(np.ones(3), np.zeros(3), np.ones(3), epsilon=0.0)
    folded = fold_batch_norm(ConvKernel(3, 2, 3, 1, 1, base.weights, base.bias, identity))
    assert folded.batch_norm is None
    assert np.allclose(folded.weights, base.weights)
    assert np.allclose(folded.bias, base.bias)

    doubling = BatchNorm(np.full(3, 2.0), np.zeros(3), np.ones(3), epsilon=0.0)
    folded = fold_batch_norm(ConvKernel(3, 2, 3, 1, 1, base.weights, base.bias, doubling))
    assert np.allclose(folded.weights, 2 * base.weights)
    assert np.allclose(folded.bias, 2 * base.bias)


def test_fold_matches_unfolded_pipeline():
    rng = np.random.default_rng(11)
    bn = BatchNorm(rng.uniform(0.5, 2.0, 6), rng.normal(0.0, 1.0, 6), rng.uniform(0.1, 3.0, 6), 1e-6)
    kernel = _random_kernel(rng, 6, 4, 3, batch_norm=bn)
    x = Tensor.from_array(rng.normal(size=(4, 10, 10)))

    plain = conv2d(x, ConvKernel(6, 4, 3, 1, 1, kernel.weights, kernel.bias)).array.astype(np.float64)
    normalized = (plain - bn.rolling_mean[:, None, None]) / np.sqrt(bn.rolling_variance[:, None, None] + 1e-6)
    expected = normalized * bn.scales[:, None, None]
    folded = conv2d(x, fold_batch_norm(kernel)).array
    assert np.abs(folded - expected).max() < 1e-4


def test_fold_without_batch_norm_is_precondition_error():
    kernel = ConvKernel(1, 1, 1, 1, 0, np.ones(1), np.zeros(1))
    with pytest.raises(PreconditionError):
        fold_batch_norm(kernel)


def test_kernel_rejects_bad_weight_length_and_variance():
    with pytest.raises(ConfigurationError):
        ConvKernel(2, 2, 3, 1, 1, np.ones(17), np.zeros(2))
    with pytest.raises(ConfigurationError):
        ConvKernel(1, 1, 1, 1, 0, np.ones(1), np.zeros(1), BatchNorm(np.ones(1), np.zeros(1), np.array([-1.0])))


def main():
    """Run all tests."""
    print("Tensor Kernels - Tests")
    print("=" * 50)

    tests = [obj for name, obj in sorted(globals().items()) if name.startswith('test_') and callable(obj)]
    passed = 0
    for test in tests:
        try:
            test()
            print(f"✓ {test.__name__}")
            passed += 1
        except Exception as e:
            print(f"✗ {test.__name__}: {e}")

    print("\n" + "=" * 50)
    print(f"Test Results: {passed}/{len(tests)} tests passed")
    return passed == len(tests)


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
