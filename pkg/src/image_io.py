import os
import re
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError

from errors import ImageFormatError
from tensor_ops import Tensor


# PPM header token, skipping whitespace and comment lines before it
_HEADER_TOKEN = re.compile(rb'(?:\s+|#[^\r\n]*[\r\n])*([^\s#]+)')


def _check_ppm_header(path: str, head: bytes):
    tokens, pos = [], 0
    for _ in range(4):
        match = _HEADER_TOKEN.match(head, pos)
        if match is None:
            break
        tokens.append(match.group(1))
        pos = match.end()
    if not tokens or tokens[0] != b'P6':
        magic = tokens[0].decode('ascii', 'replace') if tokens else 'nothing'
        raise ImageFormatError(f"{path}: expected binary PPM (P6), got {magic}; convert other formats externally")
    if len(tokens) < 4 or not all(token.isdigit() for token in tokens[1:]):
        raise ImageFormatError(f"{path}: malformed PPM header")
    if int(tokens[3]) != 255:
        raise ImageFormatError(f"{path}: expected maxval 255, got {int(tokens[3])}")


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into an (H, W, 3) uint8 array."""
    if not os.path.exists(path):
        raise ImageFormatError(f"Image not found: {path}")
    try:
        with open(path, 'rb') as file:
            _check_ppm_header(path, file.read(1024))
        with Image.open(path) as img:
            if img.format != 'PPM' or img.mode != 'RGB':
                raise ImageFormatError(
                    f"{path}: expected 8-bit binary PPM (P6), got {img.format} {img.mode}; "
                    f"convert other formats externally")
            array = np.asarray(img, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as e:
        raise ImageFormatError(f"Cannot read image {path}: {e}")
    if array.ndim != 3 or array.shape[0] == 0 or array.shape[1] == 0:
        raise ImageFormatError(f"{path}: zero-dimension image")
    return array


def write_ppm(image: np.ndarray, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format='PPM')


def _sample_grid(in_size: int, out_size: int):
    # corner-aligned: first and last samples land on the first and last pixels
    if out_size == 1 or in_size == 1:
        src = np.zeros(out_size)
    else:
        src = np.arange(out_size) * ((in_size - 1) / (out_size - 1))
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float array, horizontal pass then vertical."""
    h, w = image.shape[:2]
    x0, x1, dx = _sample_grid(w, out_w)
    y0, y1, dy = _sample_grid(h, out_h)
    dx = dx[None, :, None]
    rows = image[:, x0] * (1.0 - dx) + image[:, x1] * dx
    dy = dy[:, None, None]
    return rows[y0] * (1.0 - dy) + rows[y1] * dy


def preprocess(image: np.ndarray, size: int) -> Tensor:
    """Scale to [0, 1], stretch to size x size (no letterboxing), channel-planar."""
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ImageFormatError(f"Cannot preprocess image of shape {image.shape}")
    scaled = image.astype(np.float64) / 255.0
    if scaled.shape[0] != size or scaled.shape[1] != size:
        scaled = resize_bilinear(scaled, size, size)
    return Tensor.from_array(np.transpose(scaled, (2, 0, 1)).astype(np.float32))


def draw_detections(image: np.ndarray, detections: Iterable, color=(255, 0, 0)) -> np.ndarray:
    """Return a copy of the image with each detection outlined."""
    canvas = Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size
    for det in detections:
        box = det.bbox
        left = (box.cx - box.w / 2) * width
        top = (box.cy - box.h / 2) * height
        right = (box.cx + box.w / 2) * width
        bottom = (box.cy + box.h / 2) * height
        draw.rectangle([left, top, right, bottom], outline=color, width=2)
        draw.text((max(left, 0) + 2, max(top, 0) + 2), f'{det.score:.2f}', fill=color)
    return np.asarray(canvas, dtype=np.uint8).copy()
