"""Detection stage: backbone, semantic fusion and an anchor-free head.

The backbone emits features at strides {8, 16, 32}. Semantic maps are aligned
to the detection domain by the domain adaptation block (two conv-BN-SiLU
stages), concatenated channel-wise with the backbone maps and merged by
cross-stage fusion blocks. The head predicts, per grid cell, box offsets plus
objectness and per-class logits; the public prediction tensor is the
(4 + C) x K contract with boxes decoded to pixels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import box_intersects_canvas, centers_to_corners
from .errors import ConfigurationError, DimensionError, ValidationError
from .metrics import pairwise_iou
from .scenes import CLASS_NAMES
from .semprior import SemanticPyramid

DETECTION_STRIDES = (8, 16, 32)
# nominal object extent per stride; assignment matches sqrt(w*h) against it
BOX_SIZE_GAIN = 4.0
CHECKPOINT_VERSION = 1
SEMANTIC_MODES = ("none", "raw", "dab")


@dataclass
class GroundTruthSet:
    """Per-image boxes (center form, pixels) with class ids below num_classes."""

    boxes: list[tuple[float, float, float, float]]
    class_ids: list[int]
    num_classes: int = len(CLASS_NAMES)

    def validate(self) -> None:
        if len(self.boxes) != len(self.class_ids):
            raise ValidationError("boxes and class_ids lengths differ")
        for (cx, cy, w, h), cid in zip(self.boxes, self.class_ids):
            if w <= 0 or h <= 0:
                raise ValidationError(f"box ({cx},{cy},{w},{h}) has non-positive area")
            if not 0 <= cid < self.num_classes:
                raise ValidationError(f"class id {cid} outside [0, {self.num_classes})")


@dataclass
class DetectionBox:
    """One final detection after suppression; (x, y) is the box center."""

    x: float
    y: float
    w: float
    h: float
    class_id: int
    score: float


@dataclass
class DetectionFeature:
    """Backbone output maps keyed by detection stride."""

    maps: dict[int, torch.Tensor]

    def validate(self, widths: dict[int, int] | None = None) -> None:
        if tuple(sorted(self.maps)) != DETECTION_STRIDES:
            raise ValidationError(
                f"detection strides {sorted(self.maps)} != {list(DETECTION_STRIDES)}"
            )
        if widths:
            for s, m in self.maps.items():
                if m.shape[1] != widths[s]:
                    raise DimensionError(
                        f"stride {s} width {m.shape[1]} != configured {widths[s]}"
                    )


@dataclass
class DTUConfig:
    input_size: tuple[int, int] = (512, 1024)  # (H, W)
    num_classes: int = len(CLASS_NAMES)
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)  # backbone strides 2..32
    k_s: int = 32
    semantic_mode: str = "dab"
    score_thresh: float = 0.25
    iou_thresh: float = 0.5

    def __post_init__(self) -> None:
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ValidationError(f"semantic_mode must be one of {SEMANTIC_MODES}")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValidationError(f"input size must be divisible by 32, got {self.input_size}")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be >= 1")

    def backbone_width(self, stride: int) -> int:
        return self.widths[{2: 0, 4: 1, 8: 2, 16: 3, 32: 4}[stride]]

    def head_width(self, stride: int) -> int:
        w = self.backbone_width(stride)
        return w if self.semantic_mode == "none" else 2 * w

    def grid_hw(self, stride: int) -> tuple[int, int]:
        return self.input_size[0] // stride, self.input_size[1] // stride

    def num_columns(self) -> int:
        return sum(gh * gw for gh, gw in (self.grid_hw(s) for s in DETECTION_STRIDES))


class PredictionTensor:
    """Decoded head output for one image.

    boxes:      (K, 4) center-form pixel boxes, differentiable
    obj_logits: (K,)
    cls_logits: (K, C)
    `values()` realizes the public (4 + C) x K array where class rows carry
    sigmoid(obj) * sigmoid(cls) scores in [0, 1].
    """

    def __init__(
        self,
        boxes: torch.Tensor,
        obj_logits: torch.Tensor,
        cls_logits: torch.Tensor,
        image_size: tuple[int, int],
        strides: tuple[int, ...] = DETECTION_STRIDES,
    ):
        self.boxes = boxes
        self.obj_logits = obj_logits
        self.cls_logits = cls_logits
        self.image_size = tuple(image_size)
        self.strides = tuple(strides)

    @property
    def num_columns(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.cls_logits.shape[1]

    def validate(self) -> None:
        k = self.num_columns
        if self.obj_logits.shape != (k,) or self.cls_logits.shape[0] != k:
            raise DimensionError("prediction tensor component lengths disagree")
        expected = sum(
            (self.image_size[0] // s) * (self.image_size[1] // s) for s in self.strides
        )
        if k != expected:
            raise ValidationError(f"column count {k} != grid-cell total {expected}")
        if bool((self.boxes[:, 2:] < 0).any()):
            raise ValidationError("box widths/heights must be non-negative")

    def values(self) -> np.ndarray:
        """(4 + C) x K contract array (detached)."""
        with torch.no_grad():
            scores = torch.sigmoid(self.obj_logits)[:, None] * torch.sigmoid(self.cls_logits)
            out = torch.cat([self.boxes, scores], dim=1).T
        return out.detach().cpu().numpy()


def stack_values(preds: list[PredictionTensor]) -> np.ndarray:
    """Batch-stacked B x (4 + C) x K array."""
    return np.stack([p.values() for p in preds])


@dataclass
class Assignment:
    gt_index: int
    column: int
    stride: int
    cell: tuple[int, int]  # (gy, gx)


def _best_stride(w: float, h: float, strides: tuple[int, ...]) -> int:
    size = float(np.sqrt(w * h))
    return min(strides, key=lambda s: abs(np.log(size / (BOX_SIZE_GAIN * s))))


def assign_targets(
    gt: GroundTruthSet,
    image_size: tuple[int, int],
    strides: tuple[int, ...] = DETECTION_STRIDES,
) -> list[Assignment]:
    """Center-cell assignment at the best-matching stride.

    Each ground-truth box maps to exactly one tensor column. When two boxes
    land in the same cell the larger one wins.
    """
    gt.validate()
    ih, iw = image_size
    offsets = {}
    offset = 0
    for s in strides:
        offsets[s] = offset
        offset += (ih // s) * (iw // s)

    chosen: dict[int, Assignment] = {}
    areas: dict[int, float] = {}
    for idx, (cx, cy, w, h) in enumerate(gt.boxes):
        if not (0 <= cx < iw and 0 <= cy < ih):
            raise ValidationError(f"box center ({cx}, {cy}) outside image {iw}x{ih}")
        stride = _best_stride(w, h, strides)
        gh, gw = ih // stride, iw // stride
        gy = min(int(cy // stride), gh - 1)
        gx = min(int(cx // stride), gw - 1)
        column = offsets[stride] + gy * gw + gx
        area = w * h
        if column in chosen and areas[column] >= area:
            continue
        chosen[column] = Assignment(gt_index=idx, column=column, stride=stride, cell=(gy, gx))
        areas[column] = area
    return sorted(chosen.values(), key=lambda a: a.column)


def _box_iou_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable element-wise IoU of center-form box rows."""
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0)
    ih = (torch.minimum(ay2, by2) - torch.maximum(ay1, by1)).clamp(min=0)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return inter / union.clamp(min=1e-9)


def detection_loss(
    pred: PredictionTensor,
    gt: GroundTruthSet,
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0),
):
    """Composite loss: lambdas weight (box, class, score) terms.

    L_box is mean(1 - IoU) over assigned columns; L_class and L_score are
    binary cross-entropies. Without ground truth L_box = L_class = 0 and the
    objectness trains toward all-negative. Returns (total, components).
    """
    lam_box, lam_class, lam_score = lambdas
    device = pred.obj_logits.device
    dtype = pred.obj_logits.dtype
    obj_target = torch.zeros(pred.num_columns, device=device, dtype=dtype)

    if gt.boxes:
        assignments = assign_targets(gt, pred.image_size, pred.strides)
        cols = torch.tensor([a.column for a in assignments], dtype=torch.long, device=device)
        gt_boxes = torch.tensor(
            [gt.boxes[a.gt_index] for a in assignments], dtype=dtype, device=device
        )
        gt_classes = torch.tensor(
            [gt.class_ids[a.gt_index] for a in assignments], dtype=torch.long, device=device
        )
        obj_target[cols] = 1.0
        ious = _box_iou_torch(pred.boxes[cols], gt_boxes)
        l_box = (1.0 - ious).mean()
        cls_target = F.one_hot(gt_classes, pred.num_classes).to(dtype)
        l_class = F.binary_cross_entropy_with_logits(pred.cls_logits[cols], cls_target)
    else:
        l_box = torch.zeros((), device=device, dtype=dtype)
        l_class = torch.zeros((), device=device, dtype=dtype)

    l_score = F.binary_cross_entropy_with_logits(pred.obj_logits, obj_target)
    total = lam_box * l_box + lam_class * l_class + lam_score * l_score
    return total, {"box": l_box, "class": l_class, "score": l_score}


def nms(pred: PredictionTensor, score_thresh: float, iou_thresh: float) -> list[DetectionBox]:
    """Greedy per-class suppression of the prediction tensor.

    Candidates below score_thresh or entirely off the canvas are dropped; a
    box is suppressed when its IoU with an already kept box of the same class
    exceeds iou_thresh.
    """
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= iou_thresh <= 1.0):
        raise ValidationError("thresholds must lie in [0, 1]")
    values = pred.values()
    boxes_c = values[:4].T  # (K, 4) center form
    scores = values[4:]  # (C, K)
    ih, iw = pred.image_size
    out: list[DetectionBox] = []
    corners = centers_to_corners(boxes_c)
    for c in range(scores.shape[0]):
        idx = np.where(scores[c] >= score_thresh)[0]
        idx = np.array(
            [i for i in idx if box_intersects_canvas(boxes_c[i], iw, ih)], dtype=int
        )
        if idx.size == 0:
            continue
        order = idx[np.argsort(-scores[c][idx], kind="stable")]
        kept: list[int] = []
        for i in order:
            if kept:
                overlaps = pairwise_iou(corners[i][None], corners[kept])[0]
                if (overlaps > iou_thresh).any():
                    continue
            kept.append(int(i))
        for i in kept:
            x, y, w, h = boxes_c[i]
            out.append(DetectionBox(float(x), float(y), float(w), float(h), c, float(scores[c][i])))
    return out


class Bottleneck(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        hidden = max(1, channels // 2)
        self.conv1 = nn.Conv2d(channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.silu(self.conv1(x)))


class CrossStageBlock(nn.Module):
    """Split-transform-merge residual block (CSP style)."""

    def __init__(self, in_ch: int, out_ch: int, n: int = 1):
        super().__init__()
        half = max(1, out_ch // 2)
        self.split_a = nn.Conv2d(in_ch, half, 1)
        self.split_b = nn.Conv2d(in_ch, half, 1)
        self.transform = nn.Sequential(*[Bottleneck(half) for _ in range(n)])
        self.merge = nn.Conv2d(half * 2, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.split_a(x)
        b = self.transform(self.split_b(x))
        return self.merge(torch.cat([a, b], dim=1))


class DomainAdaptationBlock(nn.Module):
    """Two conv-BN-SiLU stages aligning semantic features to detection ones."""

    def __init__(self, k_s: int, target_channels: int):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(k_s, target_channels, 3, padding=1),
            nn.BatchNorm2d(target_channels),
            nn.SiLU(inplace=True),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(target_channels, target_channels, 3, padding=1),
            nn.BatchNorm2d(target_channels),
            nn.SiLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block2(self.block1(x))


class FusionBlock(nn.Module):
    """Channel concatenation followed by cross-stage merging."""

    def __init__(self, backbone_ch: int, sem_ch: int, out_ch: int):
        super().__init__()
        self.csp = CrossStageBlock(backbone_ch + sem_ch, out_ch, n=1)

    def forward(self, backbone_map: torch.Tensor, adapted: torch.Tensor) -> torch.Tensor:
        if backbone_map.shape[-2:] != adapted.shape[-2:]:
            raise DimensionError(
                f"spatial mismatch {tuple(backbone_map.shape[-2:])} vs {tuple(adapted.shape[-2:])}"
            )
        return self.csp(torch.cat([backbone_map, adapted], dim=1))


class Head(nn.Module):
    """Per-stride tower emitting (tx, ty, tw, th, obj, classes) maps."""

    def __init__(self, in_ch: int, num_classes: int):
        super().__init__()
        self.tower = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, 3, padding=1),
            nn.BatchNorm2d(in_ch),
            nn.SiLU(inplace=True),
        )
        self.out = nn.Conv2d(in_ch, 5 + num_classes, 1)
        nn.init.constant_(self.out.bias[4], -2.0)  # sparse objectness prior

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.tower(x))


def decode_head_outputs(
    raw: dict[int, torch.Tensor],
    image_size: tuple[int, int],
    num_classes: int,
    strides: tuple[int, ...] = DETECTION_STRIDES,
) -> list[PredictionTensor]:
    """Turn per-stride (B, 5+C, gh, gw) maps into per-image prediction tensors.

    Box decode per cell (gy, gx) at stride s:
        cx = (gx + sigmoid(tx)) * s      w = BOX_SIZE_GAIN * s * exp(tw)
        cy = (gy + sigmoid(ty)) * s      h = BOX_SIZE_GAIN * s * exp(th)
    """
    batch = next(iter(raw.values())).shape[0]
    per_image: list[list[torch.Tensor]] = [[] for _ in range(batch)]
    for s in strides:
        m = raw[s]
        b, ch, gh, gw = m.shape
        if ch != 5 + num_classes:
            raise DimensionError(f"head map has {ch} channels, expected {5 + num_classes}")
        gy, gx = torch.meshgrid(
            torch.arange(gh, dtype=m.dtype, device=m.device),
            torch.arange(gw, dtype=m.dtype, device=m.device),
            indexing="ij",
        )
        flat = m.permute(0, 2, 3, 1).reshape(b, gh * gw, ch)
        cx = (gx.reshape(-1) + torch.sigmoid(flat[:, :, 0])) * s
        cy = (gy.reshape(-1) + torch.sigmoid(flat[:, :, 1])) * s
        w = BOX_SIZE_GAIN * s * torch.exp(flat[:, :, 2].clamp(-4.0, 4.0))
        h = BOX_SIZE_GAIN * s * torch.exp(flat[:, :, 3].clamp(-4.0, 4.0))
        boxes = torch.stack([cx, cy, w, h], dim=2)
        for i in range(batch):
            per_image[i].append((boxes[i], flat[i, :, 4], flat[i, :, 5:]))

    preds = []
    for parts in per_image:
        boxes = torch.cat([p[0] for p in parts])
        obj = torch.cat([p[1] for p in parts])
        cls = torch.cat([p[2] for p in parts])
        preds.append(PredictionTensor(boxes, obj, cls, image_size, strides))
    return preds


class DTU(nn.Module):
    """Detector over the enhanced image with optional semantic fusion.

    semantic_mode selects the fusion path: "none" ignores semantics, "raw"
    injects them through a single 1x1 projection, "dab" through the domain
    adaptation block. The three modes are distinct architectures and train
    separately; `forward` accepts semantics=None in the non-"none" modes by
    zero-filling the adapted features (used for eval-time path toggling).
    """

    def __init__(self, config: DTUConfig | None = None):
        super().__init__()
        self.config = config or DTUConfig()
        w = self.config.widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, w[0], 3, stride=2, padding=1),
            nn.BatchNorm2d(w[0]),
            nn.SiLU(inplace=True),
        )
        self.stages = nn.ModuleList()
        for i in range(1, 5):
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(w[i - 1], w[i], 3, stride=2, padding=1),
                    nn.BatchNorm2d(w[i]),
                    nn.SiLU(inplace=True),
                    CrossStageBlock(w[i], w[i], n=1),
                )
            )
        mode = self.config.semantic_mode
        self.adapters = nn.ModuleDict()
        self.necks = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for s in DETECTION_STRIDES:
            bw = self.config.backbone_width(s)
            hw = self.config.head_width(s)
            if mode == "dab":
                self.adapters[str(s)] = DomainAdaptationBlock(self.config.k_s, bw)
            elif mode == "raw":
                self.adapters[str(s)] = nn.Conv2d(self.config.k_s, bw, 1)
            if mode == "none":
                self.necks[str(s)] = CrossStageBlock(bw, hw, n=1)
            else:
                self.necks[str(s)] = FusionBlock(bw, bw, hw)
            self.heads[str(s)] = Head(hw, self.config.num_classes)

    def extract_features(self, images: torch.Tensor) -> DetectionFeature:
        h = self.stem(images)
        maps = {}
        stride = 2
        for stage in self.stages:
            h = stage(h)
            stride *= 2
            if stride in DETECTION_STRIDES:
                maps[stride] = h
        feats = DetectionFeature(maps)
        feats.validate({s: self.config.backbone_width(s) for s in DETECTION_STRIDES})
        return feats

    def forward(
        self,
        images: torch.Tensor,
        semantics: dict[int, torch.Tensor] | None = None,
    ) -> list[PredictionTensor]:
        ih, iw = self.config.input_size
        if images.shape[-2:] != (ih, iw):
            raise ValidationError(
                f"detector input must be {ih}x{iw}, got {tuple(images.shape[-2:])}"
            )
        feats = self.extract_features(images)
        raw = {}
        for s in DETECTION_STRIDES:
            bmap = feats.maps[s]
            if self.config.semantic_mode == "none":
                fused = self.necks[str(s)](bmap)
            else:
                if semantics is None or s not in semantics:
                    adapted = bmap.new_zeros(
                        bmap.shape[0], self.config.backbone_width(s), *bmap.shape[-2:]
                    )
                else:
                    adapted = self.adapters[str(s)](semantics[s])
                fused = self.necks[str(s)](bmap, adapted)
            raw[s] = self.heads[str(s)](fused)
        return decode_head_outputs(raw, (ih, iw), self.config.num_classes)


def dtu_forward(model: DTU, image: np.ndarray, semantics: SemanticPyramid | None) -> PredictionTensor:
    """Run the detector on one H x W x 3 image plane at the configured size."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected H x W x C image, got {image.shape}")
    if image.shape[:2] != model.config.input_size:
        raise ValidationError(
            f"image {image.shape[:2]} != configured input size {model.config.input_size}"
        )
    sem_t = None
    if semantics is not None:
        semantics.validate(model.config.input_size)
        sem_t = {
            s: torch.from_numpy(m.transpose(2, 0, 1)[None].copy()).float()
            for s, m in semantics.maps.items()
        }
    batch = torch.from_numpy(image.transpose(2, 0, 1)[None]).float()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pred = model(batch, sem_t)[0]
    if was_training:
        model.train()
    pred.validate()
    return pred


def write_detections(path: str | os.PathLike, image_id: str, dets: list[DetectionBox]) -> None:
    """Append detections as JSON lines {image_id, class_id, x, y, w, h, score}."""
    with open(path, "a") as fh:
        for d in dets:
            fh.write(
                json.dumps(
                    {
                        "image_id": image_id,
                        "class_id": d.class_id,
                        "x": d.x,
                        "y": d.y,
                        "w": d.w,
                        "h": d.h,
                        "score": d.score,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_detections(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_dtu_checkpoint(model: DTU, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "C": model.config.num_classes,
        "strides": list(DETECTION_STRIDES),
        "widths": list(model.config.widths),
        "k_s": model.config.k_s,
        "semantic_mode": model.config.semantic_mode,
        "input_size": list(model.config.input_size),
        "version": CHECKPOINT_VERSION,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_dtu_checkpoint(path: str | os.PathLike) -> DTU:
    sidecar_path = str(path) + ".json"
    if not os.path.exists(sidecar_path):
        raise ConfigurationError(f"checkpoint sidecar missing: {sidecar_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    config = DTUConfig(
        input_size=tuple(meta["input_size"]),
        num_classes=meta["C"],
        widths=tuple(meta["widths"]),
        k_s=meta["k_s"],
        semantic_mode=meta["semantic_mode"],
    )
    model = DTU(config)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model
