"""Dataset ingestion: COCO-like annotations, resize bookkeeping, splits.

Dataset root layout:
    images/<weather>/<name>.png
    clean/<image_id>.png            (optional restoration targets)
    masks/<image_id>.png            (optional segmenter training masks)
    annotations.json
    pairs_manifest.jsonl            (restoration pairs, see weathersim)

annotations.json is COCO-like: images[] entries carry {id, file_name, width,
height, weather}; annotations[] carry {image_id, bbox: [x, y, w, h]} with the
bbox in top-left form; categories[] name the detection classes. Boxes are
stored center-form internally.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import scale_center_boxes
from .dtu import GroundTruthSet
from .errors import ValidationError
from .images import load_image, resize_image, save_image
from .scenes import CLASS_NAMES, Scene

log = logging.getLogger(__name__)

WEATHER_TAGS = ("foggy", "rainy", "snowy", "sunny")
WEATHER_FOR_KIND = {"fog": "foggy", "rain": "rainy", "snow": "snowy", "clear": "sunny"}
PPU_SIZE = (512, 512)
DTU_SIZE = (512, 1024)


@dataclass
class Sample:
    image_id: str
    image_path: str
    weather: str
    boxes: GroundTruthSet
    width: int
    height: int
    clean_path: str | None = None
    mask_path: str | None = None

    def validate(self) -> None:
        if self.weather not in WEATHER_TAGS:
            raise ValidationError(f"weather {self.weather!r} not in {WEATHER_TAGS}")
        if not os.path.exists(self.image_path):
            raise ValidationError(f"image file missing: {self.image_path}")
        self.boxes.validate()
        for cx, cy, w, h in self.boxes.boxes:
            x1, y1 = cx - w / 2, cy - h / 2
            x2, y2 = cx + w / 2, cy + h / 2
            if x1 < -1e-6 or y1 < -1e-6 or x2 > self.width + 1e-6 or y2 > self.height + 1e-6:
                raise ValidationError(
                    f"{self.image_id}: box ({cx},{cy},{w},{h}) leaves the "
                    f"{self.width}x{self.height} canvas"
                )


def load_annotations(path: str | os.PathLike) -> list[Sample]:
    """Parse and validate an annotation file into samples."""
    path = Path(path)
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed JSON in {path} at line {e.lineno}, col {e.colno}: {e.msg}")

    categories = {c["id"]: c["name"] for c in payload.get("categories", [])}
    unknown = sorted(set(categories.values()) - set(CLASS_NAMES))
    if unknown:
        raise ValidationError(f"unknown categories {unknown}; expected subset of {list(CLASS_NAMES)}")
    class_index = {name: i for i, name in enumerate(CLASS_NAMES)}

    by_image: dict = {}
    for ann in payload.get("annotations", []):
        by_image.setdefault(ann["image_id"], []).append(ann)

    samples = []
    root = path.parent
    for rec in payload["images"]:
        weather = rec.get("weather")
        if weather is None:
            parts = Path(rec["file_name"]).parts
            weather = next((p for p in parts if p in WEATHER_TAGS), None)
        if weather is None:
            raise ValidationError(f"image {rec['id']}: no weather tag in record or path")
        boxes, class_ids = [], []
        for ann in by_image.get(rec["id"], []):
            if ann["category_id"] not in categories:
                raise ValidationError(f"annotation references unknown category {ann['category_id']}")
            x, y, w, h = ann["bbox"]
            boxes.append((x + w / 2.0, y + h / 2.0, float(w), float(h)))
            class_ids.append(class_index[categories[ann["category_id"]]])
        sample = Sample(
            image_id=str(rec["id"]),
            image_path=str(root / rec["file_name"]),
            weather=weather,
            boxes=GroundTruthSet(boxes, class_ids, num_classes=len(CLASS_NAMES)),
            width=rec["width"],
            height=rec["height"],
            clean_path=str(root / rec["clean"]) if rec.get("clean") else None,
            mask_path=str(root / rec["mask"]) if rec.get("mask") else None,
        )
        sample.validate()
        samples.append(sample)
    return samples


def resize_with_boxes(
    image: np.ndarray, boxes, out_h: int, out_w: int
) -> tuple[np.ndarray, list]:
    """Bilinear resize; boxes scale by the same per-axis factors."""
    in_h, in_w = image.shape[:2]
    resized = resize_image(image, out_h, out_w)
    scaled = scale_center_boxes(boxes, out_w / in_w, out_h / in_h)
    return resized, scaled


def resize_for_ppu(image: np.ndarray, boxes=(), size: tuple[int, int] = PPU_SIZE):
    return resize_with_boxes(image, boxes, size[0], size[1])


def resize_for_dtu(image: np.ndarray, boxes=(), size: tuple[int, int] = DTU_SIZE):
    return resize_with_boxes(image, boxes, size[0], size[1])


@dataclass
class SplitManifest:
    train_ids: list[str]
    val_ids: list[str]
    seed: int
    ratio: tuple[int, int] = (4, 1)

    def validate(self) -> None:
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise ValidationError(f"train/val overlap: {sorted(overlap)[:5]}")
        total = len(self.train_ids) + len(self.val_ids)
        if total:
            expected_val = total * self.ratio[1] / sum(self.ratio)
            if abs(len(self.val_ids) - expected_val) > 1.0 + 1e-9:
                raise ValidationError(
                    f"val size {len(self.val_ids)} deviates from {self.ratio} "
                    f"ratio by more than one sample"
                )

    def to_json(self) -> str:
        return json.dumps(
            {
                "train_ids": self.train_ids,
                "val_ids": self.val_ids,
                "seed": self.seed,
                "ratio": list(self.ratio),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        p = json.loads(text)
        return cls(p["train_ids"], p["val_ids"], p["seed"], tuple(p["ratio"]))


def split(samples: list[Sample], seed: int, ratio: tuple[int, int] = (4, 1)) -> SplitManifest:
    """Deterministic shuffled split, stratified by weather tag.

    Strata smaller than the ratio total stay whole in the training set (with
    a logged warning).
    """
    if not samples:
        raise ValidationError("cannot split an empty sample list")
    parts = sum(ratio)
    strata: dict[str, list[str]] = {}
    for s in samples:
        strata.setdefault(s.weather, []).append(s.image_id)
    rng = np.random.default_rng(seed)
    train_ids: list[str] = []
    val_ids: list[str] = []
    for weather in sorted(strata):
        ids = sorted(strata[weather])
        if len(ids) < parts:
            log.warning("stratum %s has %d (<%d) samples; kept whole in train", weather, len(ids), parts)
            train_ids.extend(ids)
            continue
        perm = rng.permutation(len(ids))
        n_val = int(round(len(ids) * ratio[1] / parts))
        chosen = [ids[i] for i in perm]
        val_ids.extend(sorted(chosen[:n_val]))
        train_ids.extend(sorted(chosen[n_val:]))
    manifest = SplitManifest(train_ids=train_ids, val_ids=val_ids, seed=seed, ratio=ratio)
    if len(samples) >= parts and all(len(v) >= parts for v in strata.values()):
        manifest.validate()
    return manifest


def save_scene_dataset(scenes: list[Scene], out_dir: str | os.PathLike) -> str:
    """Write degraded scenes + annotations (+ clean images and masks).

    Returns the annotations.json path. Scenes without a degraded frame are
    written from their clean image (weather tag "sunny").
    """
    out_dir = Path(out_dir)
    records = {"images": [], "annotations": [], "categories": []}
    for i, name in enumerate(CLASS_NAMES):
        records["categories"].append({"id": i, "name": name})
    ann_id = 0
    for scene in scenes:
        weather = scene.weather if scene.degraded is not None else "sunny"
        frame = scene.degraded if scene.degraded is not None else scene.image
        rel = f"images/{weather}/{scene.image_id}.png"
        (out_dir / "images" / weather).mkdir(parents=True, exist_ok=True)
        save_image(out_dir / rel, frame)
        clean_rel = f"clean/{scene.image_id}.png"
        (out_dir / "clean").mkdir(parents=True, exist_ok=True)
        save_image(out_dir / clean_rel, scene.image)
        mask_rel = f"masks/{scene.image_id}.png"
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        save_mask(out_dir / mask_rel, scene.mask)
        h, w = frame.shape[:2]
        records["images"].append(
            {
                "id": scene.image_id,
                "file_name": rel,
                "width": w,
                "height": h,
                "weather": weather,
                "clean": clean_rel,
                "mask": mask_rel,
            }
        )
        for (cx, cy, bw, bh), cid in zip(scene.boxes, scene.class_ids):
            records["annotations"].append(
                {
                    "id": ann_id,
                    "image_id": scene.image_id,
                    "bbox": [cx - bw / 2.0, cy - bh / 2.0, bw, bh],
                    "category_id": cid,
                }
            )
            ann_id += 1
    ann_path = out_dir / "annotations.json"
    with open(ann_path, "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
    return str(ann_path)


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    import cv2

    if int(mask.max()) > 255:
        raise ValidationError("mask labels exceed 8-bit range")
    cv2.imwrite(str(path), mask.astype(np.uint8))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    import cv2

    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise ValidationError(f"cannot decode mask: {path}")
    return raw.astype(np.int32)


@dataclass
class PairSample:
    """One restoration training pair."""

    degraded: np.ndarray
    clean: np.ndarray
    kind: str = "fog"
    extra: dict = field(default_factory=dict)


def load_pair_samples(root: str | os.PathLike) -> list[PairSample]:
    """Read (degraded, clean) pairs from a weathersim output directory."""
    from .weathersim import read_manifest

    root = Path(root)
    records = read_manifest(root / "pairs_manifest.jsonl")
    pairs = []
    for rec in records:
        pairs.append(
            PairSample(
                degraded=load_image(root / rec["degraded_path"]),
                clean=load_image(root / rec["clean_path"]),
                kind=rec["kind"],
            )
        )
    return pairs
