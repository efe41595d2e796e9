from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, PreconditionError
from image_io import preprocess
from network_config import Convolutional, MaxPool, Region
from tensor_ops import Tensor, conv2d, leaky_relu, logistic_array, maxpool2d
from weights_manager import Model

# keeps exp() finite and strictly positive for any raw width/height value
MAX_LOG_SCALE = 80.0


@dataclass(frozen=True)
class BBox:
    """Centre-size box normalized to the image."""
    cx: float
    cy: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    objectness: float
    class_probs: Tuple[float, ...]
    score: float

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))


@dataclass(frozen=True)
class SizeGate:
    min_area: float
    max_area: float


@dataclass(frozen=True)
class DetectParams:
    conf_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    size_gate: Optional[SizeGate] = None

    def __post_init__(self):
        for name in ('conf_threshold', 'nms_iou_threshold'):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise PreconditionError(f"{name} must lie in (0, 1), got {value}")
        gate = self.size_gate
        if gate is not None and not 0.0 <= gate.min_area < gate.max_area:
            raise PreconditionError(f"Size gate needs 0 <= min_area < max_area, got {gate}")

    @classmethod
    def from_config(cls, config: dict) -> 'DetectParams':
        gate = None
        if config.get('min_area') is not None or config.get('max_area') is not None:
            max_area = config.get('max_area')
            gate = SizeGate(float(config.get('min_area') or 0.0), 1.0 if max_area is None else float(max_area))
        return cls(float(config.get('conf_threshold', 0.25)),
                   float(config.get('nms_iou_threshold', 0.45)), gate)


def forward(model: Model, input: Tensor, threads: int = 1, executor: Optional[Executor] = None) -> Tensor:
    """Run every layer up to the region head and return the raw prediction map."""
    config = model.config
    if input.shape != config.input_shape:
        raise ConfigurationError(f"Input shape {input.shape} does not match network input {config.input_shape}")
    if threads > 1 and executor is None:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return forward(model, input, threads, pool)

    kernels = model.inference_kernels()
    x = input
    for index, layer in enumerate(config.layers):
        if isinstance(layer, Convolutional):
            x = conv2d(x, kernels[index], threads=threads, executor=executor)
            if layer.activation == 'leaky':
                x = leaky_relu(x, 0.1)
        elif isinstance(layer, MaxPool):
            x = maxpool2d(x, layer.size, layer.stride)
    return x


def _decode_arrays(pred: Tensor, region: Region):
    entries = region.entries
    if pred.channels % entries or pred.channels // entries != region.num_anchors:
        raise ConfigurationError(
            f"Prediction map has {pred.channels} channels; expected "
            f"{region.num_anchors}x(5+{region.classes})")
    a, h, w = region.num_anchors, pred.height, pred.width
    raw = pred.array.astype(np.float64).reshape(a, entries, h, w)
    anchors = np.asarray(region.anchors, dtype=np.float64)

    cols = np.arange(w, dtype=np.float64)[None, None, :]
    rows = np.arange(h, dtype=np.float64)[None, :, None]
    cx = (cols + logistic_array(raw[:, 0])) / w
    cy = (rows + logistic_array(raw[:, 1])) / h
    bw = anchors[:, 0, None, None] * np.exp(np.clip(raw[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE)) / w
    bh = anchors[:, 1, None, None] * np.exp(np.clip(raw[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)) / h
    objectness = logistic_array(raw[:, 4])
    if region.classes == 1:
        probs = np.ones((a, 1, h, w))
    else:
        logits = raw[:, 5:]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)

    # decode order: row, column, anchor
    def order(x):
        return np.transpose(x, (1, 2, 0)).reshape(-1)

    probs = np.transpose(probs, (2, 3, 0, 1)).reshape(-1, region.classes)
    return order(cx), order(cy), order(bw), order(bh), order(objectness), probs


def decode_region(pred: Tensor, region: Region, conf_threshold: float) -> List[Detection]:
    """Turn a raw prediction map into boxes whose score reaches conf_threshold."""
    cx, cy, bw, bh, objectness, probs = _decode_arrays(pred, region)
    scores = objectness * probs.max(axis=1)
    detections = []
    for i in np.flatnonzero(scores >= conf_threshold):
        bbox = BBox(float(np.clip(cx[i], 0.0, 1.0)), float(np.clip(cy[i], 0.0, 1.0)), float(bw[i]), float(bh[i]))
        detections.append(Detection(bbox, float(objectness[i]), tuple(float(p) for p in probs[i]),
                                    float(scores[i])))
    return detections


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return inter / union


def nms(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy suppression; equal scores keep their input (decode) order."""
    if not dets:
        return []
    boxes = np.array([d.bbox.corners() for d in dets], dtype=np.float64)
    widths = np.array([d.bbox.w for d in dets], dtype=np.float64)
    heights = np.array([d.bbox.h for d in dets], dtype=np.float64)
    areas = widths * heights
    scores = np.array([d.score for d in dets], dtype=np.float64)

    order = np.argsort(-scores, kind='stable')
    keep = []
    while order.size:
        top, rest = order[0], order[1:]
        keep.append(int(top))
        iw = np.maximum(0.0, np.minimum(boxes[top, 2], boxes[rest, 2]) - np.maximum(boxes[top, 0], boxes[rest, 0]))
        ih = np.maximum(0.0, np.minimum(boxes[top, 3], boxes[rest, 3]) - np.maximum(boxes[top, 1], boxes[rest, 1]))
        inter = iw * ih
        union = areas[top] + areas[rest] - inter
        overlap = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        order = rest[overlap <= iou_threshold]
    return [dets[i] for i in keep]


def size_gate(dets: Sequence[Detection], min_area: float, max_area: float) -> List[Detection]:
    """Drop boxes whose normalized area falls outside [min_area, max_area]."""
    if not 0.0 <= min_area < max_area:
        raise PreconditionError(f"Size gate needs 0 <= min_area < max_area, got [{min_area}, {max_area}]")
    return [d for d in dets if min_area <= d.bbox.w * d.bbox.h <= max_area]


def detect(model: Model, image: np.ndarray, params: DetectParams = DetectParams(), threads: int = 1,
           executor: Optional[Executor] = None) -> List[Detection]:
    """preprocess -> forward -> decode -> size gate -> NMS."""
    tensor = preprocess(image, model.config.input_size)
    pred = forward(model, tensor, threads=threads, executor=executor)
    dets = decode_region(pred, model.config.region, params.conf_threshold)
    if params.size_gate is not None:
        dets = size_gate(dets, params.size_gate.min_area, params.size_gate.max_area)
    return nms(dets, params.nms_iou_threshold)


def format_detections(dets: Sequence[Detection]) -> str:
    """One line per box: class score cx cy w h."""
    return ''.join(f'{d.class_id} {d.score:.6f} {d.bbox.cx:.6f} {d.bbox.cy:.6f} {d.bbox.w:.6f} {d.bbox.h:.6f}\n'
                   for d in dets)
