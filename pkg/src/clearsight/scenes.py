"""Procedural street-toy scenes: colored shape prototypes on a textured
background, with exact boxes and per-pixel class masks for free.

One shape/color prototype per detection class keeps the fixtures learnable at
desk scale while still exercising classification, localization and the
segmentation prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .metrics import iou
from .boxes import center_to_corner

CLASS_NAMES = ("car", "pedestrian", "truck", "bus", "rider", "bicycle", "motorcycle")

# Prototype color per class (RGB in [0,1]) and shape kind.
_PROTOTYPES = (
    ("rect_wide", (0.85, 0.15, 0.15)),
    ("rect_tall", (0.10, 0.75, 0.20)),
    ("rect_big", (0.15, 0.25, 0.85)),
    ("rect_round", (0.90, 0.80, 0.10)),
    ("triangle", (0.85, 0.15, 0.80)),
    ("ring", (0.10, 0.80, 0.80)),
    ("disc", (0.95, 0.55, 0.10)),
)


@dataclass
class Scene:
    """A clean synthetic frame with ground truth."""

    image: np.ndarray  # H x W x 3 float in [0,1]
    boxes: list[tuple[float, float, float, float]]  # center form (cx, cy, w, h)
    class_ids: list[int]
    mask: np.ndarray  # H x W int, 0 = background, class_id + 1 otherwise

    num_classes: int = len(CLASS_NAMES)
    weather: str = "sunny"
    image_id: str = ""
    degraded: np.ndarray | None = None
    recipe_kind: str | None = None
    extra: dict = field(default_factory=dict)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    sky = np.array([0.55, 0.65, 0.75])
    ground = np.array([0.35, 0.33, 0.30])
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    img = sky * (1 - t) + ground * t
    # low-frequency texture from an upsampled coarse noise grid
    coarse = rng.normal(0.0, 0.06, size=(max(2, h // 16), max(2, w // 16), 3))
    reps = (int(np.ceil(h / coarse.shape[0])), int(np.ceil(w / coarse.shape[1])))
    tex = np.kron(coarse, np.ones((reps[0], reps[1], 1)))[:h, :w, :]
    return np.clip(img + tex, 0.0, 1.0)


def _shape_mask(kind: str, bh: int, bw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:bh, 0:bw]
    cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
    if kind.startswith("rect"):
        inside = np.ones((bh, bw), dtype=bool)
        if kind == "rect_round":
            ry, rx = bh / 2.0, bw / 2.0
            inside = (((yy - cy) / ry) ** 4 + ((xx - cx) / rx) ** 4) <= 1.0
        return inside
    if kind == "triangle":
        # upright triangle: apex at top center
        fy = (yy + 1) / bh
        return np.abs(xx - cx) <= fy * (bw / 2.0)
    ry, rx = bh / 2.0, bw / 2.0
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    if kind == "ring":
        return (r2 <= 1.0) & (r2 >= 0.35)
    return r2 <= 1.0  # disc


def make_scene(
    height: int,
    width: int,
    seed: int,
    num_objects: tuple[int, int] = (1, 4),
    classes: tuple[int, ...] | None = None,
    min_size: float = 0.18,
    max_size: float = 0.45,
) -> Scene:
    """Draw one scene. Object extents span [min_size, max_size] * min(H, W)."""
    if height < 8 or width < 8:
        raise ValidationError(f"scene too small: {height}x{width}")
    rng = np.random.default_rng(seed)
    classes = tuple(classes) if classes is not None else tuple(range(len(CLASS_NAMES)))
    img = _background(rng, height, width)
    mask = np.zeros((height, width), dtype=np.int32)
    boxes: list[tuple[float, float, float, float]] = []
    class_ids: list[int] = []

    count = int(rng.integers(num_objects[0], num_objects[1] + 1))
    base = min(height, width)
    attempts = 0
    while len(boxes) < count and attempts < 80:
        attempts += 1
        cid = int(rng.choice(classes))
        kind, color = _PROTOTYPES[cid]
        extent = rng.uniform(min_size, max_size) * base
        aspect = {"rect_wide": 1.8, "rect_tall": 0.45, "rect_big": 1.4}.get(kind, 1.0)
        aspect *= rng.uniform(0.85, 1.18)
        bw = int(np.clip(extent * np.sqrt(aspect), 4, width - 2))
        bh = int(np.clip(extent / np.sqrt(aspect), 4, height - 2))
        x0 = int(rng.integers(1, max(2, width - bw)))
        y0 = int(rng.integers(1, max(2, height - bh)))
        box = (x0 + bw / 2.0, y0 + bh / 2.0, float(bw), float(bh))
        if any(iou(center_to_corner(box), center_to_corner(b)) > 0.25 for b in boxes):
            continue
        inside = _shape_mask(kind, bh, bw)
        jitter = rng.uniform(-0.06, 0.06, size=3)
        shade = np.clip(np.asarray(color) + jitter, 0.0, 1.0)
        region = img[y0 : y0 + bh, x0 : x0 + bw]
        region[inside] = shade
        mask_region = mask[y0 : y0 + bh, x0 : x0 + bw]
        mask_region[inside] = cid + 1
        boxes.append(box)
        class_ids.append(cid)

    return Scene(image=img, boxes=boxes, class_ids=class_ids, mask=mask)


def make_scene_set(
    n: int,
    height: int,
    width: int,
    seed: int,
    **kwargs,
) -> list[Scene]:
    """n scenes with per-scene seeds derived as seed + index."""
    scenes = []
    for i in range(n):
        scene = make_scene(height, width, seed=seed + i, **kwargs)
        scene.image_id = f"scene_{i:04d}"
        scenes.append(scene)
    return scenes
