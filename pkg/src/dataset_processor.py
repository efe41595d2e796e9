import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from detector import BBox
from errors import AnnotationError
from image_io import write_ppm
from logging_manager import get_logger

logger = get_logger('dataset')


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    bbox: BBox


@dataclass(frozen=True)
class GroundTruthSet:
    image_path: str
    boxes: Tuple[GroundTruthBox, ...]


def annotation_path(image_path: str) -> str:
    return os.path.splitext(image_path)[0] + '.txt'


def _clamp_box(cx, cy, w, h, source: str) -> BBox:
    clamped = (min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), min(max(w, 0.0), 1.0), min(max(h, 0.0), 1.0))
    if clamped != (cx, cy, w, h):
        logger.warning(f"{source}: box ({cx}, {cy}, {w}, {h}) clamped to [0, 1]")
    return BBox(*clamped)


def parse_annotation(text: str, source: str = '<annotation>') -> Tuple[GroundTruthBox, ...]:
    """Parse 'class cx cy w h' lines, all coordinates normalized."""
    boxes = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise AnnotationError(f"{source}:{line_no}: expected 'class cx cy w h', got '{line}'")
        try:
            class_id = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError:
            raise AnnotationError(f"{source}:{line_no}: non-numeric field in '{line}'")
        if class_id < 0:
            raise AnnotationError(f"{source}:{line_no}: negative class id {class_id}")
        if not all(np.isfinite(v) for v in (cx, cy, w, h)):
            raise AnnotationError(f"{source}:{line_no}: non-finite coordinate in '{line}'")
        bbox = _clamp_box(cx, cy, w, h, f"{source}:{line_no}")
        if bbox.w <= 0 or bbox.h <= 0:
            raise AnnotationError(f"{source}:{line_no}: box has zero width or height")
        boxes.append(GroundTruthBox(class_id, bbox))
    return tuple(boxes)


def read_annotation(path: str) -> Tuple[GroundTruthBox, ...]:
    if not os.path.exists(path):
        raise AnnotationError(f"Annotation file not found: {path}")
    with open(path, 'r', encoding='utf-8') as file:
        return parse_annotation(file.read(), path)


def load_annotations(list_file: str) -> List[GroundTruthSet]:
    """Read an image list (one path per line, relative to the list) and each image's sibling .txt."""
    if not os.path.exists(list_file):
        raise AnnotationError(f"Image list not found: {list_file}")
    base = os.path.dirname(os.path.abspath(list_file))
    sets = []
    with open(list_file, 'r', encoding='utf-8') as file:
        for raw in file:
            entry = raw.strip()
            if not entry or entry.startswith('#'):
                continue
            image_path = entry if os.path.isabs(entry) else os.path.join(base, entry)
            sets.append(GroundTruthSet(image_path, read_annotation(annotation_path(image_path))))
    logger.info(f"Loaded {len(sets)} annotated images from {list_file}")
    return sets


def format_annotation(boxes) -> str:
    return ''.join(f'{b.class_id} {b.bbox.cx:.6f} {b.bbox.cy:.6f} {b.bbox.w:.6f} {b.bbox.h:.6f}\n' for b in boxes)


def summarize_dataset(sets: List[GroundTruthSet]) -> Dict[str, float]:
    """Counts and box-size statistics of an annotated set."""
    areas = [box.bbox.area for s in sets for box in s.boxes]
    return {
        'images': len(sets),
        'boxes': len(areas),
        'empty_images': sum(1 for s in sets if not s.boxes),
        'boxes_per_image': len(areas) / len(sets) if sets else 0.0,
        'min_area': min(areas) if areas else 0.0,
        'mean_area': float(np.mean(areas)) if areas else 0.0,
        'max_area': max(areas) if areas else 0.0,
    }


def _draw_vehicle(canvas: np.ndarray, rng: np.random.Generator, size: int) -> BBox:
    w = int(rng.integers(size // 16, size // 5))
    h = int(rng.integers(size // 16, size // 5))
    left = int(rng.integers(0, size - w))
    top = int(rng.integers(0, size - h))
    body = rng.integers(140, 256, 3)
    canvas[top:top + h, left:left + w] = body
    # roof panel so the blob is not a flat rectangle
    canvas[top + h // 4:top + 3 * h // 4, left + w // 4:left + 3 * w // 4] = body // 2
    return BBox((left + w / 2) / size, (top + h / 2) / size, w / size, h / size)


def generate_synthetic_dataset(out_dir: str, count: int = 20, size: int = 256, seed: int = 0,
                               max_objects: int = 4) -> str:
    """Write a small top-view style dataset: noisy backgrounds with box-shaped vehicles.

    Returns the path of the generated image list.
    """
    if count < 1 or size < 32 or max_objects < 0:
        raise AnnotationError(f"Invalid synthetic dataset request: count={count}, size={size}")
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(count):
        canvas = rng.integers(30, 90, (size, size, 3)).astype(np.uint8)
        boxes = [GroundTruthBox(0, _draw_vehicle(canvas, rng, size))
                 for _ in range(int(rng.integers(0, max_objects + 1)))]
        name = f'img_{i:04d}.ppm'
        write_ppm(canvas, os.path.join(out_dir, name))
        with open(os.path.join(out_dir, annotation_path(name)), 'w', encoding='utf-8') as file:
            file.write(format_annotation(boxes))
        names.append(name)
    list_path = os.path.join(out_dir, 'list.txt')
    with open(list_path, 'w', encoding='utf-8') as file:
        file.write('\n'.join(names) + '\n')
    logger.info(f"Wrote {count} synthetic images to {out_dir}")
    return list_path
