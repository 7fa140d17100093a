"""Sequential two-stage optimization and latency benchmarking.

Stage 1 fits the restoration network on degraded/clean pairs with the
Charbonnier loss; stage 2 freezes it (and the semantic provider) and fits the
detector on enhanced frames. Both stages use SGD with momentum, per-epoch
checkpoints and deterministic seeded batching.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import PairSample, resize_with_boxes
from .dtu import DTU, DTUConfig, GroundTruthSet, detection_loss, nms, save_dtu_checkpoint
from .errors import ConfigurationError, ValidationError
from .metrics import mean_average_precision, psnr
from .boxes import center_to_corner
from .ppu import PPU, PPUConfig, charbonnier_loss, save_ppu_checkpoint
from .scenes import Scene
from .semprior import provider_features

DEFAULT_LAMBDAS = (1.0, 1.0, 1.0)


@dataclass
class TrainConfig:
    stage: str = "ppu"  # "ppu" | "dtu"
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    train_batch: int = 12
    eval_batch: int = 16
    epochs: int = 50
    seed: int = 0
    grad_clip: float = 10.0
    steps_per_epoch: int | None = None  # desk-scale cap
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS
    device: str = "cpu"

    def __post_init__(self) -> None:
        if self.stage not in ("ppu", "dtu"):
            raise ValidationError(f"stage must be 'ppu' or 'dtu', got {self.stage!r}")
        # lr == 0 is allowed as a frozen-optimizer degenerate case
        if self.lr < 0:
            raise ValidationError("lr must be >= 0")
        if self.train_batch < 1 or self.eval_batch < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def append_step(self, record: dict) -> None:
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ValidationError("step indices must increase monotonically")
        for key, value in record.items():
            if isinstance(value, float) and not np.isfinite(value):
                raise ValidationError(f"non-finite {key} at step {record['step']}: {value}")
        self.steps.append(record)

    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.evals:
                fh.write(json.dumps({"type": "eval", **rec}, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | os.PathLike) -> "RunLog":
        out = cls()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("type")
                (out.steps if kind == "step" else out.evals).append(rec)
        return out


def state_hash(module: torch.nn.Module) -> str:
    """Digest of all parameters and buffers, for freeze checks."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def parameter_hash(module: torch.nn.Module) -> str:
    """Digest of learnable parameters only (normalization statistics excluded)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    return torch.stack(
        [torch.from_numpy(np.asarray(im).transpose(2, 0, 1)).float() for im in images]
    )


def _dump_bad_batch(out_dir: Path, tensors: dict[str, torch.Tensor], step: int) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"nan_batch_step{step}.npz"
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in tensors.items()})
    return path


def train_ppu(
    pairs: list[PairSample],
    config: TrainConfig,
    out_dir: str | os.PathLike,
    provider: torch.nn.Module | None = None,
    val_pairs: list[PairSample] | None = None,
    ppu_config: PPUConfig | None = None,
) -> tuple[str, RunLog]:
    """Fit the restoration stage; returns (best checkpoint path, run log).

    The best checkpoint is selected by validation PSNR (falling back to the
    training pairs when no validation set is given).
    """
    if not pairs:
        raise ValidationError("ppu training needs at least one pair")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    model = PPU(ppu_config)
    model.train()
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    runlog = RunLog()
    val = val_pairs or pairs
    best_psnr = -np.inf
    best_path = out_dir / "ppu_best.pt"
    step = 0
    n = len(pairs)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batches = [
            order[i : i + config.train_batch] for i in range(0, n, config.train_batch)
        ]
        if config.steps_per_epoch is not None:
            batches = batches[: config.steps_per_epoch]
        for idx in batches:
            t0 = time.perf_counter()
            degraded = _to_batch([pairs[i].degraded for i in idx])
            clean = _to_batch([pairs[i].clean for i in idx])
            sem = provider_features(provider, degraded) if provider is not None else None
            pred = model(degraded, sem)
            loss = charbonnier_loss(pred, clean, model.config.charbonnier)
            if not torch.isfinite(loss):
                dump = _dump_bad_batch(out_dir, {"degraded": degraded, "clean": clean}, step)
                raise RuntimeError(f"non-finite ppu loss at step {step}; batch dumped to {dump}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            step += 1
            runlog.append_step(
                {
                    "step": step,
                    "loss": float(loss.detach()),
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
            )
        val_psnr = evaluate_ppu_psnr(model, val, provider, batch=config.eval_batch)
        runlog.evals.append({"epoch": epoch, "val_psnr": val_psnr})
        save_ppu_checkpoint(model, out_dir / "ppu_last.pt")
        if val_psnr > best_psnr:
            best_psnr = val_psnr
            save_ppu_checkpoint(model, best_path)
    runlog.write_jsonl(out_dir / "ppu_runlog.jsonl")
    return str(best_path), runlog


def evaluate_ppu_psnr(
    model: PPU,
    pairs: list[PairSample],
    provider: torch.nn.Module | None = None,
    batch: int = 16,
) -> float:
    """Mean PSNR of enhanced vs clean over the given pairs."""
    was_training = model.training
    model.eval()
    scores = []
    with torch.no_grad():
        for i in range(0, len(pairs), batch):
            chunk = pairs[i : i + batch]
            degraded = _to_batch([p.degraded for p in chunk])
            sem = provider_features(provider, degraded) if provider is not None else None
            out = model(degraded, sem).permute(0, 2, 3, 1).numpy().astype(np.float64)
            for j, p in enumerate(chunk):
                scores.append(psnr(out[j], p.clean))
    if was_training:
        model.train()
    return float(np.mean(scores))


@dataclass
class DetectionSample:
    """Degraded frame at the restoration input size, boxes at detector scale."""

    image: np.ndarray
    gt: GroundTruthSet
    weather: str = "sunny"
    image_id: str = ""


def detection_samples_from_scenes(
    scenes: list[Scene],
    ppu_size: tuple[int, int],
    dtu_size: tuple[int, int],
) -> list[DetectionSample]:
    samples = []
    for scene in scenes:
        frame = scene.degraded if scene.degraded is not None else scene.image
        image, _ = resize_with_boxes(frame, [], ppu_size[0], ppu_size[1])
        sh, sw = frame.shape[:2]
        boxes = [
            (cx * dtu_size[1] / sw, cy * dtu_size[0] / sh, w * dtu_size[1] / sw, h * dtu_size[0] / sh)
            for cx, cy, w, h in scene.boxes
        ]
        samples.append(
            DetectionSample(
                image=image,
                gt=GroundTruthSet(boxes, list(scene.class_ids), scene.num_classes),
                weather=scene.weather,
                image_id=scene.image_id,
            )
        )
    return samples


def _pipeline_forward(
    dtu: DTU,
    batch_ppu: torch.Tensor,
    ppu: PPU | None,
    provider: torch.nn.Module | None,
):
    """Shared train/eval path: (optional) enhance, resize, detect."""
    if ppu is not None:
        sem_p = provider_features(provider, batch_ppu) if provider is not None else None
        with torch.no_grad():
            enhanced = ppu(batch_ppu, sem_p)
    else:
        enhanced = batch_ppu
    x = F.interpolate(
        enhanced, size=dtu.config.input_size, mode="bilinear", align_corners=False
    )
    sem_d = None
    if dtu.config.semantic_mode != "none" and provider is not None:
        sem_d = provider_features(provider, x)
    return dtu(x, sem_d)


def train_dtu(
    samples: list[DetectionSample],
    config: TrainConfig,
    out_dir: str | os.PathLike,
    ppu: PPU | None,
    provider: torch.nn.Module | None = None,
    dtu_config: DTUConfig | None = None,
    val_samples: list[DetectionSample] | None = None,
) -> tuple[str, RunLog]:
    """Fit the detection stage on enhanced (or raw degraded) frames.

    The restoration model and semantic provider stay frozen; a digest check
    guards against accidental updates. Best checkpoint by validation mAP@50
    when a validation set is given, else the final state.
    """
    if not samples:
        raise ValidationError("dtu training needs at least one sample")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    model = DTU(dtu_config)
    model.train()
    if ppu is not None:
        ppu.eval()
        ppu_digest = state_hash(ppu)
    provider_digest = state_hash(provider) if provider is not None else None

    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    runlog = RunLog()
    best_map = -np.inf
    best_path = out_dir / "dtu_best.pt"
    step = 0
    n = len(samples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batches = [
            order[i : i + config.train_batch] for i in range(0, n, config.train_batch)
        ]
        if config.steps_per_epoch is not None:
            batches = batches[: config.steps_per_epoch]
        for idx in batches:
            t0 = time.perf_counter()
            batch = _to_batch([samples[i].image for i in idx])
            preds = _pipeline_forward(model, batch, ppu, provider)
            total = None
            lam = dict(zip(("box", "class", "score"), config.lambdas))
            comps_sum = {"box": 0.0, "class": 0.0, "score": 0.0}
            for k, i in enumerate(idx):
                loss_i, comps = detection_loss(preds[k], samples[i].gt, config.lambdas)
                total = loss_i if total is None else total + loss_i
                for key in comps_sum:  # logged components carry their lambda weights
                    comps_sum[key] += lam[key] * float(comps[key].detach())
            total = total / len(idx)
            if not torch.isfinite(total):
                dump = _dump_bad_batch(out_dir, {"batch": batch}, step)
                raise RuntimeError(f"non-finite dtu loss at step {step}; batch dumped to {dump}")
            opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            step += 1
            runlog.append_step(
                {
                    "step": step,
                    "loss": float(total.detach()),
                    "loss_box": comps_sum["box"] / len(idx),
                    "loss_class": comps_sum["class"] / len(idx),
                    "loss_score": comps_sum["score"] / len(idx),
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
            )
        if val_samples:
            val_map = evaluate_dtu_map50(model, val_samples, ppu, provider, batch=config.eval_batch)
            runlog.evals.append({"epoch": epoch, "val_map50": val_map})
            if val_map > best_map:
                best_map = val_map
                save_dtu_checkpoint(model, best_path)
        save_dtu_checkpoint(model, out_dir / "dtu_last.pt")
    if not val_samples:
        save_dtu_checkpoint(model, best_path)
    if ppu is not None and state_hash(ppu) != ppu_digest:
        raise ConfigurationError("restoration weights changed during detector training")
    if provider_digest is not None and state_hash(provider) != provider_digest:
        raise ConfigurationError("provider weights changed during detector training")
    runlog.write_jsonl(out_dir / "dtu_runlog.jsonl")
    return str(best_path), runlog


def predict_detections(
    model: DTU,
    samples: list[DetectionSample],
    ppu: PPU | None,
    provider: torch.nn.Module | None,
    batch: int = 8,
    score_thresh: float | None = None,
    iou_thresh: float | None = None,
):
    """Detections per sample (center-form DetectionBox lists)."""
    was_training = model.training
    model.eval()
    score_thresh = model.config.score_thresh if score_thresh is None else score_thresh
    iou_thresh = model.config.iou_thresh if iou_thresh is None else iou_thresh
    results = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            tensor = _to_batch([s.image for s in chunk])
            preds = _pipeline_forward(model, tensor, ppu, provider)
            for pred in preds:
                results.append(nms(pred, score_thresh, iou_thresh))
    if was_training:
        model.train()
    return results


def evaluate_dtu_map50(
    model: DTU,
    samples: list[DetectionSample],
    ppu: PPU | None,
    provider: torch.nn.Module | None,
    batch: int = 8,
) -> float:
    detections = predict_detections(model, samples, ppu, provider, batch=batch)
    dets, gts = [], []
    for sample, boxes in zip(samples, detections):
        for d in boxes:
            dets.append((sample.image_id, d.class_id, center_to_corner((d.x, d.y, d.w, d.h)), d.score))
        for box, cid in zip(sample.gt.boxes, sample.gt.class_ids):
            gts.append((sample.image_id, cid, center_to_corner(box)))
    if not gts:
        return 0.0
    value, _ = mean_average_precision(dets, gts, (0.50,))
    return value


def bench(
    ppu: PPU,
    dtu: DTU,
    provider: torch.nn.Module,
    images: list[np.ndarray],
    repeats: int = 5,
    warmup: int = 3,
) -> dict:
    """Estimated per-frame latency of the four component stacks.

    Every pipeline component is timed in interleaved cycles (so clock drift
    hits all components equally) and the four rows are composed from the
    component medians:

        detector            detector forward
        ppu_detector        + restoration without semantics
        ppu_detector_sem    semantic extraction + semantic-guided restoration
                            + detector (adapter bypassed)
        full                + the domain adapter

    The adapter's incremental cost is the difference of the last two rows.
    """
    if warmup < 3:
        raise ValidationError("bench needs at least 3 warmup iterations")
    ppu.eval()
    dtu.eval()
    dtu_size = dtu.config.input_size

    def components(x):
        out = {}
        t0 = time.perf_counter()
        sem_p = provider_features(provider, x)
        out["extract_ppu"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        enhanced = ppu(x, sem_p)
        out["ppu_sem"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        ppu(x, None)
        out["ppu_plain"] = time.perf_counter() - t0

        resized = F.interpolate(enhanced, size=dtu_size, mode="bilinear", align_corners=False)
        t0 = time.perf_counter()
        sem_d = provider_features(provider, resized)
        out["extract_dtu"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        dtu(resized, None)
        out["detector"] = time.perf_counter() - t0

        if dtu.config.semantic_mode != "none":
            t0 = time.perf_counter()
            for s, adapter in dtu.adapters.items():
                adapter(sem_d[int(s)])
            out["adapter"] = time.perf_counter() - t0
        else:
            out["adapter"] = 0.0
        return {k: v * 1e3 for k, v in out.items()}

    tensors = [_to_batch([im]) for im in images]
    samples: dict[str, list[float]] = {}
    with torch.no_grad():
        for _ in range(warmup):
            components(tensors[0])
        for _ in range(repeats):
            for t in tensors:
                for key, value in components(t).items():
                    samples.setdefault(key, []).append(value)

    med = {k: float(np.median(v)) for k, v in samples.items()}
    p90 = {k: float(np.percentile(v, 90)) for k, v in samples.items()}
    rows = {
        "detector": ("detector",),
        "ppu_detector": ("detector", "ppu_plain"),
        "ppu_detector_sem": ("detector", "ppu_sem", "extract_ppu", "extract_dtu"),
        "full": ("detector", "ppu_sem", "extract_ppu", "extract_dtu", "adapter"),
    }
    report: dict = {
        "rows": {},
        "components_ms": med,
        "repeats": repeats,
        "num_images": len(images),
    }
    for name, parts in rows.items():
        report["rows"][name] = {
            "median_ms": sum(med[p] for p in parts),
            "p90_ms": sum(p90[p] for p in parts),
        }
    report["dab_increment_ms"] = (
        report["rows"]["full"]["median_ms"] - report["rows"]["ppu_detector_sem"]["median_ms"]
    )
    return report
