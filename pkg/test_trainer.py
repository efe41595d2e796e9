#!/usr/bin/env python3
"""
Tests for the detection loss, backpropagation, gradient checking and toy training
"""

import sys
import os
import logging

import numpy as np
import pytest

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from backprop import TrainableNet, col2im, im2col, random_trainable
from dataset_processor import GroundTruthBox
from detector import BBox, DetectParams, detect, forward, iou
from errors import PreconditionError, TrainingError
from logging_manager import get_logger
from network_config import parse_config, read_config, serialize_config
from tensor_ops import Tensor
from trainer import (GRADCHECK_CONFIG_PATH, TOY_CONFIG_PATH, LossParams, _check_divergence, assign_targets,
                     format_losses, grad_check, make_toy_example, network_loss_fn, train_toy, yolo_loss, yolo_loss_array)
from weights_manager import init_toy_model

GRAD_TOLERANCE = 1e-3


def _logit(p):
    return np.log(p / (1.0 - p))


def test_assign_targets_cell_and_anchor():
    anchors = ((1.0, 1.0), (3.0, 1.0))
    wide = GroundTruthBox(0, BBox(0.30, 0.60, 0.70, 0.25))
    square = GroundTruthBox(0, BBox(0.30, 0.60, 0.25, 0.25))
    assignment = assign_targets([wide, square], anchors, 4)
    assert set(assignment) == {(2, 1, 1), (2, 1, 0)}
    assert assignment[(2, 1, 1)].bbox == wide.bbox


def test_assign_targets_larger_box_keeps_shared_slot():
    small = GroundTruthBox(0, BBox(0.30, 0.30, 0.20, 0.20))
    large = GroundTruthBox(1, BBox(0.32, 0.32, 0.26, 0.26))
    for order in ([small, large], [large, small]):
        assignment = assign_targets(order, ((1.0, 1.0),), 4)
        assert list(assignment.values())[0].class_id == 1
        assert len(assignment) == 1


def test_zero_map_without_objects():
    value, grad = yolo_loss_array(np.zeros((6, 2, 2)), [], ((1.0, 1.0),))
    assert value == pytest.approx(0.5)
    # d/dt 0.5 * sigmoid(t)^2 at t = 0
    assert np.allclose(grad[4], 0.125)
    assert not np.any(grad[:4])


def test_perfect_prediction_has_near_zero_loss():
    s, anchors = 4, ((1.0, 1.0), (2.0, 3.0))
    box = BBox(0.40, 0.70, 0.45, 0.80)
    pred = np.zeros((2, 7, s, s))
    pred[:, 4] = -30.0
    (row, col, anchor), = assign_targets([GroundTruthBox(1, box)], anchors, s)
    t = pred[anchor, :, row, col]
    t[0] = _logit(s * box.cx - col)
    t[1] = _logit(s * box.cy - row)
    t[2] = np.log(s * box.w / anchors[anchor][0])
    t[3] = np.log(s * box.h / anchors[anchor][1])
    t[4] = 30.0
    t[5], t[6] = -30.0, 30.0
    value, _ = yolo_loss_array(pred.reshape(14, s, s), [GroundTruthBox(1, box)], anchors)
    assert value < 1e-6


def test_loss_tensor_wrapper_and_params():
    pred = Tensor.from_array(np.zeros((6, 2, 2)))
    out = yolo_loss(pred, [], ((1.0, 1.0),), LossParams(lambda_noobj=1.0))
    assert out.value == pytest.approx(1.0)
    assert out.gradient.shape == (6, 2, 2)
    with pytest.raises(PreconditionError):
        LossParams(lambda_coord=-1.0)
    assert LossParams.from_config({'lambda_coord': 2}).lambda_coord == 2.0


def test_loss_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    anchors = ((1.0, 1.0), (2.5, 1.5), (0.6, 2.0))
    for instance in range(20):
        s = int(rng.integers(2, 6))
        classes = int(rng.integers(1, 4))
        pred = rng.normal(0.0, 1.0, (len(anchors) * (5 + classes), s, s))
        boxes = [GroundTruthBox(int(rng.integers(0, classes)), BBox(*rng.uniform(0.05, 0.95, 2),
                                                                    *rng.uniform(0.05, 0.6, 2)))
                 for _ in range(int(rng.integers(1, 4)))]
        result = grad_check(lambda x: yolo_loss_array(x, boxes, anchors), pred, eps=1e-3, seed=instance)
        assert result.max_error < GRAD_TOLERANCE, instance


def test_grad_check_on_known_functions():
    x = np.random.default_rng(1).normal(size=300)
    good = grad_check(lambda v: (float(np.sum(v ** 2)), 2 * v), x)
    assert good.checked == 200
    assert good.max_error < 1e-6
    constant = grad_check(lambda v: (3.0, np.zeros_like(v)), x)
    assert constant.max_error == 0.0
    wrong = grad_check(lambda v: (float(np.sum(v ** 2)), v), x)
    assert wrong.max_error > 0.3
    with pytest.raises(PreconditionError):
        grad_check(lambda v: (0.0, v), x, eps=1e-2)
    with pytest.raises(PreconditionError):
        grad_check(lambda v: (0.0, v), x, samples=50)


def test_im2col_col2im_are_adjoint():
    rng = np.random.default_rng(2)
    for k, stride, pad in ((3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0)):
        x = rng.normal(size=(3, 7, 9))
        cols, out_h, out_w = im2col(x, k, stride, pad)
        y = rng.normal(size=cols.shape)
        lhs = float(np.sum(cols * y))
        rhs = float(np.sum(x * col2im(y, x.shape, k, stride, pad, out_h, out_w)))
        assert lhs == pytest.approx(rhs)


def test_trainable_forward_matches_inference_forward():
    config = read_config(TOY_CONFIG_PATH)
    net = random_trainable(config, seed=3, scale=0.3)
    model = net.to_model()
    x = np.random.default_rng(4).uniform(0.0, 1.0, config.input_shape)
    expected = forward(model, Tensor.from_array(x)).array
    assert np.abs(net.forward(x) - expected).max() < 1e-4


def test_flat_parameters_round_trip():
    net = random_trainable(read_config(GRADCHECK_CONFIG_PATH), seed=5)
    vector = net.flat_parameters()
    assert vector.size == 4 * 2 * 9 + 4 + 6 * 4 + 6
    net.set_flat_parameters(vector * 2)
    assert np.array_equal(net.flat_parameters(), vector * 2)
    with pytest.raises(PreconditionError):
        net.set_flat_parameters(vector[:-1])


def test_network_gradient_on_smooth_network():
    text = serialize_config(read_config(GRADCHECK_CONFIG_PATH)).replace('leaky', 'linear')
    text = text.replace('[maxpool]\nsize=2\nstride=2\n\n', '')
    net = random_trainable(parse_config(text), seed=6)
    x = np.random.default_rng(7).uniform(0.0, 1.0, net.config.input_shape)
    _, boxes = make_toy_example(net.config.input_size)
    result = grad_check(network_loss_fn(net, x, boxes), net.flat_parameters(), eps=1e-5)
    assert result.max_error < GRAD_TOLERANCE


def test_network_gradient_through_leaky_and_pool():
    net = random_trainable(read_config(GRADCHECK_CONFIG_PATH), seed=8)
    x = np.random.default_rng(9).uniform(0.0, 1.0, net.config.input_shape)
    _, boxes = make_toy_example(net.config.input_size)
    result = grad_check(network_loss_fn(net, x, boxes), net.flat_parameters(), eps=1e-5)
    assert result.max_error < GRAD_TOLERANCE


def _toy():
    config = read_config(TOY_CONFIG_PATH)
    image, boxes = make_toy_example(config.input_size)
    return init_toy_model(config, seed=0), image, boxes


def test_zero_learning_rate_leaves_model_unchanged():
    model, image, boxes = _toy()
    trained, losses = train_toy(model, image, boxes, steps=5, learning_rate=0.0)
    assert len(losses) == 5
    assert len(set(losses)) == 1
    for index, kernel in model.kernels.items():
        assert np.array_equal(trained.kernels[index].weights, kernel.weights)
        assert np.array_equal(trained.kernels[index].bias, kernel.bias)


def test_head_only_training_is_monotone():
    model, image, boxes = _toy()
    head = model.config.conv_layers()[-1][0]
    trained, losses = train_toy(model, image, boxes, steps=60, learning_rate=0.01, trainable_layers=[head])
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    for index, kernel in model.kernels.items():
        if index != head:
            assert np.array_equal(trained.kernels[index].weights, kernel.weights)


def test_toy_model_overfits_single_image():
    model, image, boxes = _toy()
    trained, losses = train_toy(model, image, boxes, steps=2000, learning_rate=0.05)
    assert losses[-1] < 0.05 * losses[0]
    dets = detect(trained, image, DetectParams())
    assert dets
    assert iou(dets[0].bbox, boxes[0].bbox) > 0.7
    assert format_losses(losses).splitlines()[0] == 'step,loss'


def test_train_rejects_bad_arguments():
    model, image, boxes = _toy()
    with pytest.raises(PreconditionError):
        train_toy(model, image, boxes, steps=-1, learning_rate=0.1)
    with pytest.raises(PreconditionError):
        train_toy(model, image, boxes, steps=1, learning_rate=0.1, trainable_layers=[2])


def test_non_finite_loss_raises_training_error():
    model, image, _ = _toy()
    broken = [GroundTruthBox(0, BBox(0.5, 0.5, float('nan'), 0.25))]
    with pytest.raises(TrainingError) as info:
        train_toy(model, image, broken, steps=3, learning_rate=0.1)
    assert info.value.step == 0


def test_divergence_warning_uses_every_window(caplog):
    get_logger().addHandler(caplog.handler)
    caplog.set_level(logging.WARNING, logger='dronet_bench')
    steady = [1.0 - 1e-4 * step for step in range(300)]
    _check_divergence(steady)
    assert "diverging" not in caplog.text
    # a bump between block boundaries
    bumped = list(steady)
    bumped[175] = 2.0
    _check_divergence(bumped)
    get_logger().removeHandler(caplog.handler)
    assert "steps 125-175" in caplog.text


def test_to_model_keeps_trained_values():
    net = random_trainable(read_config(GRADCHECK_CONFIG_PATH), seed=10)
    model = net.to_model(seen=7)
    assert model.seen == 7
    again = TrainableNet(model)
    assert np.allclose(again.flat_parameters(), net.flat_parameters(), atol=1e-6)


def main():
    """Run all tests."""
    print("Toy Training - Tests")
    print("=" * 50)

    tests = [obj for name, obj in sorted(globals().items())
             if name.startswith('test_') and callable(obj) and obj.__code__.co_argcount == 0]
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
