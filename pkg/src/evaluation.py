import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from dataset_processor import GroundTruthBox, GroundTruthSet
from detector import DetectParams, Detection, detect, iou
from errors import DetectorError, PreconditionError
from image_io import read_ppm
from logging_manager import get_logger
from weights_manager import Model

logger = get_logger('evaluation')

DetectFn = Callable[[np.ndarray, GroundTruthSet], List[Detection]]


@dataclass(frozen=True)
class EvalCounts:
    t_pos: int = 0
    f_pos: int = 0
    f_neg: int = 0
    iou_sum: float = 0.0

    def __add__(self, other: 'EvalCounts') -> 'EvalCounts':
        return EvalCounts(self.t_pos + other.t_pos, self.f_pos + other.f_pos,
                          self.f_neg + other.f_neg, self.iou_sum + other.iou_sum)


def sensitivity(c: EvalCounts) -> Optional[float]:
    """T_pos / (T_pos + F_neg); None when there is no ground truth."""
    denominator = c.t_pos + c.f_neg
    return c.t_pos / denominator if denominator else None


def precision(c: EvalCounts) -> Optional[float]:
    """T_pos / (T_pos + F_pos); None when nothing was detected."""
    denominator = c.t_pos + c.f_pos
    return c.t_pos / denominator if denominator else None


def mean_iou(c: EvalCounts) -> Optional[float]:
    return c.iou_sum / c.t_pos if c.t_pos else None


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_match_threshold: float = 0.5) -> EvalCounts:
    """Greedy one-to-one matching in descending score order, class-agnostic."""
    ordered = sorted(dets, key=lambda d: -d.score)
    matched = [False] * len(gts)
    t_pos = f_pos = 0
    iou_sum = 0.0
    for det in ordered:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            overlap = iou(det.bbox, gt.bbox)
            if overlap > best_iou:
                best, best_iou = g, overlap
        if best >= 0 and best_iou >= iou_match_threshold:
            matched[best] = True
            t_pos += 1
            iou_sum += best_iou
        else:
            f_pos += 1
    return EvalCounts(t_pos, f_pos, matched.count(False), iou_sum)


@dataclass(frozen=True)
class EvalReport:
    counts: EvalCounts
    fps: float
    images: int
    skipped: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def sensitivity(self) -> Optional[float]:
        return sensitivity(self.counts)

    @property
    def precision(self) -> Optional[float]:
        return precision(self.counts)

    @property
    def mean_iou(self) -> Optional[float]:
        return mean_iou(self.counts)

    def to_dict(self) -> dict:
        return {
            'images': self.images,
            'skipped': list(self.skipped),
            't_pos': self.counts.t_pos,
            'f_pos': self.counts.f_pos,
            'f_neg': self.counts.f_neg,
            'sensitivity': self.sensitivity,
            'precision': self.precision,
            'mean_iou': self.mean_iou,
            'fps': self.fps,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + '\n'

    def to_text(self) -> str:
        def show(value: Optional[float]) -> str:
            return 'n/a' if value is None else f'{value:.4f}'

        lines = [
            f'images       {self.images}',
            f'skipped      {len(self.skipped)}',
            f'T_pos        {self.counts.t_pos}',
            f'F_pos        {self.counts.f_pos}',
            f'F_neg        {self.counts.f_neg}',
            f'sensitivity  {show(self.sensitivity)}',
            f'precision    {show(self.precision)}',
            f'mean_iou     {show(self.mean_iou)}',
            f'fps          {self.fps:.2f}',
        ]
        lines += [f'skipped: {path}' for path in self.skipped]
        return '\n'.join(lines) + '\n'


def evaluate_dataset(model: Optional[Model], gts: Sequence[GroundTruthSet],
                     params: DetectParams = DetectParams(), iou_match_threshold: float = 0.5,
                     workers: int = 1, detect_fn: Optional[DetectFn] = None) -> EvalReport:
    """Detect on every readable image and accumulate matching counts.

    Images are read before the clock starts; FPS covers preprocessing and
    inference only. detect_fn replaces the model when given. Raises
    PreconditionError when no image can be read.
    """
    if detect_fn is None:
        if model is None:
            raise DetectorError("evaluate_dataset needs a model or a detect_fn")

        def detect_fn(image, _entry):
            return detect(model, image, params)

    loaded = []
    skipped = []
    for entry in gts:
        try:
            loaded.append((entry, read_ppm(entry.image_path)))
        except DetectorError as e:
            logger.warning(f"Skipping unreadable image {entry.image_path}: {e}")
            skipped.append(entry.image_path)
    if not loaded:
        raise PreconditionError(f"No readable images to evaluate ({len(skipped)} skipped)")

    def run(item):
        entry, image = item
        return detect_fn(image, entry)

    start = time.perf_counter()
    if workers > 1 and len(loaded) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, loaded))
    else:
        results = [run(item) for item in loaded]
    elapsed = time.perf_counter() - start

    counts = EvalCounts()
    for (entry, _), dets in zip(loaded, results):
        counts = counts + match_detections(dets, entry.boxes, iou_match_threshold)

    fps = len(loaded) / max(elapsed, 1e-9)
    return EvalReport(counts, fps, len(loaded), tuple(skipped))
