"""Reference fidelity and detection metrics: PSNR, SSIM, IoU, AP/mAP.

Detection records are plain tuples:
    detection    (image_id, class_id, (x1, y1, x2, y2), score)
    ground truth (image_id, class_id, (x1, y1, x2, y2))
PSNR sums squared error with an order-independent exact accumulator so two
correct implementations agree bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    mse = math.fsum((d * d).tolist()) / d.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kern = np.outer(g, g)
    return kern / kern.sum()


def _valid_filter(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
    pad = kern.shape[0] // 2
    full = ndimage.correlate(x, kern, mode="constant")
    return full[pad:-pad, pad:-pad]


def _ssim_single(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    kern = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu1 = _valid_filter(a, kern)
    mu2 = _valid_filter(b, kern)
    s11 = _valid_filter(a * a, kern) - mu1 * mu1
    s22 = _valid_filter(b * b, kern) - mu2 * mu2
    s12 = _valid_filter(a * b, kern) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), valid mode.

    Color images average the per-channel scores.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValidationError(
            f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )
    if a.ndim == 2:
        return _ssim_single(a, b, peak)
    return float(np.mean([_ssim_single(a[:, :, c], b[:, :, c], peak) for c in range(a.shape[2])]))


def iou(box1, box2) -> float:
    """Intersection over union of two corner-form boxes (x1, y1, x2, y2)."""
    ax1, ay1, ax2, ay2 = box1
    bx1, by1, bx2, by2 = box2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix between two (N, 4) / (M, 4) corner-form arrays."""
    a = np.asarray(boxes_a, dtype=np.float64)
    b = np.asarray(boxes_b, dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class ApConfig:
    """AP evaluation settings: IoU thresholds and interpolation grid."""

    iou_thresholds: tuple[float, ...] = tuple(np.arange(0.50, 0.96, 0.05).round(2))
    recall_points: int = 101
    class_count: int = 7

    def __post_init__(self) -> None:
        ts = self.iou_thresholds
        if any(not (0.0 <= t <= 1.0) for t in ts):
            raise ValidationError("iou thresholds must lie in [0, 1]")
        if any(t2 <= t1 for t1, t2 in zip(ts, ts[1:])):
            raise ValidationError("iou thresholds must be strictly increasing")
        if self.recall_points < 2:
            raise ValidationError("need at least 2 recall points")


def match_detections(dets, gts, iou_thresh: float):
    """Greedy highest-score-first matching within each image.

    dets/gts are single-class records. Returns a TP/FP flag per detection in
    descending-score order, plus the total ground-truth count.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][3])
    gt_by_image: dict = {}
    for j, g in enumerate(gts):
        gt_by_image.setdefault(g[0], []).append(j)
    matched = set()
    flags = []
    for i in order:
        image_id, _, box, _ = dets[i]
        best_j, best_iou = -1, 0.0
        for j in gt_by_image.get(image_id, ()):
            if j in matched:
                continue
            ov = iou(box, gts[j][2])
            if ov >= iou_thresh and ov > best_iou:
                best_j, best_iou = j, ov
        if best_j >= 0:
            matched.add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(gts)


def average_precision(dets, gts, iou_thresh: float, cfg: ApConfig | None = None) -> float:
    """Interpolated AP for one class over the config's recall grid."""
    cfg = cfg or ApConfig()
    if not gts:
        raise ValidationError("average_precision needs at least one ground-truth box")
    if not dets:
        return 0.0
    flags, n_gt = match_detections(dets, gts, iou_thresh)
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    grid = np.linspace(0.0, 1.0, cfg.recall_points)
    ap = 0.0
    for r in grid:
        mask = recall >= r
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / cfg.recall_points


def mean_average_precision(dets, gts, iou_thresholds, cfg: ApConfig | None = None):
    """mAP averaged over classes (those present in gt) then thresholds.

    Returns (map_value, per_class) where per_class maps class_id to its AP
    averaged over the thresholds.
    """
    cfg = cfg or ApConfig()
    classes = sorted({g[1] for g in gts})
    if not classes:
        return 0.0, {}
    per_class: dict[int, float] = {}
    for c in classes:
        class_dets = [d for d in dets if d[1] == c]
        class_gts = [g for g in gts if g[1] == c]
        aps = [average_precision(class_dets, class_gts, t, cfg) for t in iou_thresholds]
        per_class[c] = float(np.mean(aps))
    return float(np.mean(list(per_class.values()))), per_class


@dataclass
class EvalReport:
    """Per-weather detection and restoration quality summary."""

    per_weather: dict[str, dict] = field(default_factory=dict)
    per_class_ap50: dict[str, dict[int, float]] = field(default_factory=dict)

    def validate(self) -> None:
        for weather, row in self.per_weather.items():
            for key, value in row.items():
                if value is None:
                    continue
                if not np.isfinite(value):
                    raise ValidationError(f"{weather}/{key} is not finite: {value}")
            if row["mAP_50"] + 1e-12 < row["mAP_50_95"]:
                raise ValidationError(
                    f"{weather}: mAP_50 {row['mAP_50']} < mAP_50_95 {row['mAP_50_95']}"
                )

    def to_json(self) -> str:
        payload = {
            "per_weather": self.per_weather,
            "per_class_ap50": {
                w: {str(c): v for c, v in row.items()} for w, row in self.per_class_ap50.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        per_class = {
            w: {int(c): v for c, v in row.items()}
            for w, row in payload.get("per_class_ap50", {}).items()
        }
        return cls(per_weather=payload["per_weather"], per_class_ap50=per_class)

    def render_table(self) -> str:
        """Aligned text table: one column group per weather condition."""
        weathers = sorted(self.per_weather)
        cols = ["mAP_50_95", "mAP_50", "mAP_75", "PSNR", "SSIM"]
        lines = []
        header = ["weather".ljust(10)] + [w.center(9) for w in weathers]
        lines.append(" | ".join(header))
        lines.append("-" * len(lines[0]))
        for key in cols:
            row = [key.ljust(10)]
            for w in weathers:
                value = self.per_weather[w].get(key)
                row.append(("   --    " if value is None else f"{value:9.4f}"))
            lines.append(" | ".join(row))
        return "\n".join(lines)


def evaluate(model_outputs: dict, ground_truth: dict, cfg: ApConfig | None = None) -> EvalReport:
    """Score detections (and optional restored images) per weather tag.

    model_outputs: image_id -> {"detections": [(class_id, corner_box, score)],
                                "enhanced": optional image plane}
    ground_truth:  image_id -> {"weather": str,
                                "boxes": [(class_id, corner_box)],
                                "clean": optional image plane}
    """
    cfg = cfg or ApConfig()
    if set(model_outputs) != set(ground_truth):
        missing = set(ground_truth) ^ set(model_outputs)
        raise ValidationError(f"output/ground-truth id mismatch: {sorted(missing)[:5]}")

    by_weather: dict[str, dict] = {}
    for image_id, truth in ground_truth.items():
        bucket = by_weather.setdefault(
            truth["weather"], {"dets": [], "gts": [], "psnr": [], "ssim": []}
        )
        out = model_outputs[image_id]
        for class_id, box, score in out.get("detections", []):
            bucket["dets"].append((image_id, class_id, box, score))
        for class_id, box in truth["boxes"]:
            bucket["gts"].append((image_id, class_id, box))
        enhanced = out.get("enhanced")
        clean = truth.get("clean")
        if enhanced is not None and clean is not None:
            bucket["psnr"].append(psnr(enhanced, clean))
            bucket["ssim"].append(ssim(enhanced, clean))

    report = EvalReport()
    for weather, bucket in by_weather.items():
        map5095, per_class = mean_average_precision(
            bucket["dets"], bucket["gts"], cfg.iou_thresholds, cfg
        )
        map50, per_class50 = mean_average_precision(bucket["dets"], bucket["gts"], (0.50,), cfg)
        map75, _ = mean_average_precision(bucket["dets"], bucket["gts"], (0.75,), cfg)
        report.per_weather[weather] = {
            "mAP_50_95": map5095,
            "mAP_50": map50,
            "mAP_75": map75,
            "PSNR": float(np.mean(bucket["psnr"])) if bucket["psnr"] else None,
            "SSIM": float(np.mean(bucket["ssim"])) if bucket["ssim"] else None,
        }
        report.per_class_ap50[weather] = per_class50
    report.validate()
    return report
