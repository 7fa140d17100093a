"""Box coordinate helpers.

Two layouts appear in the pipeline: center form (cx, cy, w, h) used by the
detector, and corner form (x1, y1, x2, y2) used by the overlap metrics.
"""

from __future__ import annotations

import numpy as np


def center_to_corner(box):
    cx, cy, w, h = box
    return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def corner_to_center(box):
    x1, y1, x2, y2 = box
    return ((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


def centers_to_corners(boxes: np.ndarray) -> np.ndarray:
    """Vectorized center -> corner for an (N, 4) array."""
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] - boxes[:, 2] / 2.0
    out[:, 1] = boxes[:, 1] - boxes[:, 3] / 2.0
    out[:, 2] = boxes[:, 0] + boxes[:, 2] / 2.0
    out[:, 3] = boxes[:, 1] + boxes[:, 3] / 2.0
    return out


def scale_center_boxes(boxes, sx: float, sy: float):
    """Scale center-form boxes by per-axis factors (sx on x/w, sy on y/h)."""
    return [(cx * sx, cy * sy, w * sx, h * sy) for cx, cy, w, h in boxes]


def box_intersects_canvas(box_center, width: int, height: int) -> bool:
    x1, y1, x2, y2 = center_to_corner(box_center)
    return x2 > 0 and y2 > 0 and x1 < width and y1 < height
