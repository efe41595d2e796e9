import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from backprop import TrainableNet
from dataset_processor import GroundTruthBox
from detector import BBox
from errors import ConfigurationError, PreconditionError, TrainingError
from image_io import preprocess
from logging_manager import get_logger
from network_config import CFG_DIR
from tensor_ops import Tensor, logistic_array
from weights_manager import Model

logger = get_logger('trainer')

TOY_CONFIG_PATH = os.path.join(CFG_DIR, 'toy.cfg')
GRADCHECK_CONFIG_PATH = os.path.join(CFG_DIR, 'gradcheck.cfg')
TOY_IMAGE_SIZE = 64
DIVERGENCE_START = 100
DIVERGENCE_WINDOW = 50


@dataclass(frozen=True)
class LossParams:
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    lambda_obj: float = 1.0
    lambda_class: float = 1.0

    def __post_init__(self):
        for name in ('lambda_coord', 'lambda_noobj', 'lambda_obj', 'lambda_class'):
            if getattr(self, name) < 0:
                raise PreconditionError(f"{name} must be >= 0")

    @classmethod
    def from_config(cls, config: dict) -> 'LossParams':
        return cls(*(float(config.get(name, default)) for name, default in
                     (('lambda_coord', 5.0), ('lambda_noobj', 0.5), ('lambda_obj', 1.0), ('lambda_class', 1.0))))


@dataclass(frozen=True)
class LossOutput:
    value: float
    gradient: Tensor


@dataclass(frozen=True)
class Target:
    class_id: int
    bbox: BBox


def _as_targets(gt_boxes) -> List[Target]:
    targets = []
    for box in gt_boxes:
        if isinstance(box, GroundTruthBox):
            targets.append(Target(box.class_id, box.bbox))
        else:
            targets.append(Target(0, box))
    return targets


def _shape_iou(w: float, h: float, aw: float, ah: float) -> float:
    inter = min(w, aw) * min(h, ah)
    return inter / (w * h + aw * ah - inter)


def assign_targets(gt_boxes, anchors: Sequence[Tuple[float, float]], S: int) -> Dict[Tuple[int, int, int], Target]:
    """Map (row, col, anchor) to the ground truth that cell and anchor are responsible for.

    The cell is the one holding the box centre; the anchor is the best
    centred-shape IoU match, lowest index on ties. When two boxes want the
    same slot the larger one keeps it.
    """
    assignment: Dict[Tuple[int, int, int], Target] = {}
    for target in _as_targets(gt_boxes):
        box = target.bbox
        col = min(max(int(np.floor(S * box.cx)), 0), S - 1)
        row = min(max(int(np.floor(S * box.cy)), 0), S - 1)
        ious = [_shape_iou(S * box.w, S * box.h, aw, ah) for aw, ah in anchors]
        key = (row, col, int(np.argmax(ious)))
        other = assignment.get(key)
        if other is not None:
            loser = box if box.area <= other.bbox.area else other.bbox
            logger.warning(f"Two ground truths share cell ({row}, {col}) anchor {key[2]}; dropped {loser}")
            if box.area <= other.bbox.area:
                continue
        assignment[key] = target
    return assignment


def yolo_loss_array(pred: np.ndarray, gt_boxes, anchors: Sequence[Tuple[float, float]],
                    params: LossParams = LossParams()) -> Tuple[float, np.ndarray]:
    """Squared-error detection loss on a raw (A*(5+C), S, S) map and its analytic gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    a = len(anchors)
    channels, s, s_w = pred.shape
    if s != s_w:
        raise ConfigurationError(f"Prediction map must be square, got {s}x{s_w}")
    if a < 1 or channels % a or channels // a < 6:
        raise ConfigurationError(f"Prediction map has {channels} channels; not a multiple of {a}x(5+C)")
    entries = channels // a
    classes = entries - 5
    raw = pred.reshape(a, entries, s, s)
    grad = np.zeros_like(raw)

    # no-object term everywhere, replaced below for responsible slots
    obj = logistic_array(raw[:, 4])
    d_obj = obj * (1.0 - obj)
    responsible = np.zeros((a, s, s), dtype=bool)
    assignment = assign_targets(gt_boxes, anchors, s)
    for (row, col, anchor) in assignment:
        responsible[anchor, row, col] = True
    loss = params.lambda_noobj * float(np.sum(np.where(responsible, 0.0, obj ** 2)))
    grad[:, 4] = np.where(responsible, 0.0, 2.0 * params.lambda_noobj * obj * d_obj)

    for (row, col, anchor), target in assignment.items():
        box = target.bbox
        t = raw[anchor, :, row, col]
        g = grad[anchor, :, row, col]
        aw, ah = anchors[anchor]

        sx, sy = logistic_array(t[0]), logistic_array(t[1])
        rx = sx - (s * box.cx - col)
        ry = sy - (s * box.cy - row)
        rw = t[2] - np.log(s * max(box.w, 1e-9) / aw)
        rh = t[3] - np.log(s * max(box.h, 1e-9) / ah)
        loss += params.lambda_coord * float(rx ** 2 + ry ** 2 + rw ** 2 + rh ** 2)
        g[0] = 2.0 * params.lambda_coord * rx * sx * (1.0 - sx)
        g[1] = 2.0 * params.lambda_coord * ry * sy * (1.0 - sy)
        g[2] = 2.0 * params.lambda_coord * rw
        g[3] = 2.0 * params.lambda_coord * rh

        o = obj[anchor, row, col]
        loss += params.lambda_obj * float((o - 1.0) ** 2)
        g[4] = 2.0 * params.lambda_obj * (o - 1.0) * o * (1.0 - o)

        if classes > 1:
            logits = t[5:]
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            onehot = np.zeros(classes)
            onehot[min(target.class_id, classes - 1)] = 1.0
            r = p - onehot
            loss += params.lambda_class * float(np.sum(r ** 2))
            dp = 2.0 * params.lambda_class * r
            g[5:] = p * (dp - np.dot(dp, p))

    return loss, grad.reshape(pred.shape)


def yolo_loss(pred: Tensor, gt_boxes, anchors: Sequence[Tuple[float, float]],
              params: LossParams = LossParams()) -> LossOutput:
    value, grad = yolo_loss_array(pred.array, gt_boxes, anchors, params)
    return LossOutput(value, Tensor.from_array(grad))


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    mean_error: float
    checked: int


def grad_check(fn: Callable[[np.ndarray], Tuple[float, np.ndarray]], x: np.ndarray, eps: float = 1e-3,
               samples: int = 200, seed: int = 0) -> GradCheckResult:
    """Compare fn's analytic gradient with central differences on random coordinates.

    Relative error per coordinate is |a - n| / max(|a| + |n|, 1e-6).
    """
    if not 1e-6 < eps < 1e-2:
        raise PreconditionError(f"eps must lie in (1e-6, 1e-2), got {eps}")
    if samples < 200:
        raise PreconditionError(f"grad_check needs at least 200 samples, got {samples}")
    x = np.array(x, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    rng = np.random.default_rng(seed)
    coords = rng.choice(flat.size, size=min(samples, flat.size), replace=False)

    errors = []
    for i in coords:
        original = flat[i]
        flat[i] = original + eps
        plus, _ = fn(x.copy())
        flat[i] = original - eps
        minus, _ = fn(x.copy())
        flat[i] = original
        numeric = (plus - minus) / (2.0 * eps)
        errors.append(abs(analytic[i] - numeric) / max(abs(analytic[i]) + abs(numeric), 1e-6))
    return GradCheckResult(float(max(errors)), float(np.mean(errors)), len(errors))


def network_loss_fn(net: TrainableNet, x: np.ndarray, gt_boxes, params: LossParams = LossParams()):
    """Loss of the whole network as a function of its flat parameter vector."""
    anchors = net.config.region.anchors
    order = list(net.params)

    def fn(vector: np.ndarray):
        net.set_flat_parameters(vector)
        value, grad = yolo_loss_array(net.forward(x), gt_boxes, anchors, params)
        grads, _ = net.backward(grad)
        return value, TrainableNet.flatten_gradients(grads, order)

    return fn


def make_toy_example(size: int = TOY_IMAGE_SIZE) -> Tuple[np.ndarray, List[GroundTruthBox]]:
    """Black image with one white square a quarter of the image wide."""
    image = np.zeros((size, size, 3), dtype=np.uint8)
    side = size // 4
    left, top = size // 4, size // 2
    image[top:top + side, left:left + side] = 255
    box = BBox((left + side / 2) / size, (top + side / 2) / size, side / size, side / size)
    return image, [GroundTruthBox(0, box)]


def _check_divergence(losses: Sequence[float]):
    """Warn when the loss at any step after the start exceeds the loss a window earlier."""
    values = np.asarray(losses, dtype=np.float64)
    if len(values) <= DIVERGENCE_START + DIVERGENCE_WINDOW:
        return
    earlier = values[DIVERGENCE_START:-DIVERGENCE_WINDOW]
    later = values[DIVERGENCE_START + DIVERGENCE_WINDOW:]
    rising = np.flatnonzero(later > earlier)
    if rising.size:
        start = DIVERGENCE_START + int(rising[0])
        logger.warning(f"Loss increased over steps {start}-{start + DIVERGENCE_WINDOW} "
                       f"({values[start]:.6f} -> {values[start + DIVERGENCE_WINDOW]:.6f}); "
                       f"training may be diverging, consider a lower learning rate")


def train_toy(model: Model, image: np.ndarray, gt_boxes, steps: int, learning_rate: float,
              params: LossParams = LossParams(), trainable_layers: Optional[Sequence[int]] = None,
              log_interval: int = 100) -> Tuple[Model, List[float]]:
    """Plain gradient descent on a single image.

    Batch norm is folded before training. Returns the trained model and the
    loss recorded before each update.
    """
    if steps < 0 or learning_rate < 0:
        raise PreconditionError(f"Invalid steps {steps} / learning rate {learning_rate}")
    net = TrainableNet(model)
    trainable = set(net.params if trainable_layers is None else trainable_layers)
    unknown = trainable - set(net.params)
    if unknown:
        raise PreconditionError(f"Layers {sorted(unknown)} are not convolutional")
    anchors = net.config.region.anchors
    x = preprocess(image, net.config.input_size).array.astype(np.float64)

    losses: List[float] = []
    for step in range(steps):
        value, grad = yolo_loss_array(net.forward(x), gt_boxes, anchors, params)
        if not np.isfinite(value):
            raise TrainingError("Loss became non-finite", step)
        losses.append(value)
        if log_interval and step % log_interval == 0:
            logger.info(f"Step {step}: loss {value:.6f}")
        if learning_rate == 0:
            continue
        grads, _ = net.backward(grad)
        for index in trainable:
            d_weights, d_bias = grads[index]
            net.params[index].weights -= learning_rate * d_weights
            net.params[index].bias -= learning_rate * d_bias

    _check_divergence(losses)
    return net.to_model(model.seen + steps), losses


def format_losses(losses: Sequence[float]) -> str:
    return 'step,loss\n' + ''.join(f'{step},{loss:.8f}\n' for step, loss in enumerate(losses))
