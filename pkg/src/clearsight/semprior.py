"""Frozen multi-scale semantic priors behind a pluggable provider interface.

A provider turns an image into feature maps at strides {2, 4, 8, 16, 32},
all with the same channel count k_s. The default provider is a small
trainable strided CNN ("toy" segmenter); anything honoring the pyramid
contract can be registered in its place.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError, ValidationError

SEMANTIC_STRIDES = (2, 4, 8, 16, 32)
CHECKPOINT_VERSION = 1


@dataclass
class SemanticPyramid:
    """stride -> (H/stride, W/stride, k_s) feature maps."""

    maps: dict[int, np.ndarray]

    @property
    def k_s(self) -> int:
        return next(iter(self.maps.values())).shape[2]

    def validate(self, input_hw: tuple[int, int] | None = None) -> None:
        if tuple(sorted(self.maps)) != SEMANTIC_STRIDES:
            raise ValidationError(
                f"pyramid strides {sorted(self.maps)} != {list(SEMANTIC_STRIDES)}"
            )
        widths = {m.shape[2] for m in self.maps.values()}
        if len(widths) != 1:
            raise ValidationError(f"pyramid channel counts differ: {sorted(widths)}")
        if input_hw is not None:
            h, w = input_hw
            for s, m in self.maps.items():
                if m.shape[:2] != (h // s, w // s):
                    raise DimensionError(
                        f"stride {s} map is {m.shape[:2]}, expected {(h // s, w // s)}"
                    )


@dataclass
class SemanticProviderSpec:
    provider_id: str = "toy"
    num_classes: int = 8
    channel_count: int = 32
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.channel_count < 4:
            raise ValidationError("channel_count must be >= 4")


class ToySegmenter(nn.Module):
    """Five-stage strided CNN; each stage projects to k_s channels.

    A light head on the stride-2 features yields per-pixel class logits for
    training; downstream consumers only read the projected pyramid.
    """

    def __init__(self, num_classes: int = 8, k_s: int = 32, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.k_s = k_s
        widths = [width, width * 2, width * 4, width * 4, width * 4]
        self.stages = nn.ModuleList()
        self.projections = nn.ModuleList()
        prev = 3
        for w in widths:
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, 3, stride=2, padding=1),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                )
            )
            self.projections.append(nn.Conv2d(w, k_s, 1))
            prev = w
        self.seg_head = nn.Conv2d(k_s, num_classes, 1)

    def features(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        out = {}
        h = x
        for stride, stage, proj in zip(SEMANTIC_STRIDES, self.stages, self.projections):
            h = stage(h)
            out[stride] = proj(h)
        return out

    def forward(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        return self.features(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        logits = self.seg_head(feats[2])
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


ProviderFactory = Callable[[SemanticProviderSpec], nn.Module]
_PROVIDERS: dict[str, ProviderFactory] = {}


def register_provider(provider_id: str, factory: ProviderFactory) -> None:
    _PROVIDERS[provider_id] = factory


def _build_toy(spec: SemanticProviderSpec) -> ToySegmenter:
    # deterministic initialization so an unloaded provider is reproducible;
    # trunk width tracks the requested channel count
    with torch.random.fork_rng():
        torch.manual_seed(0x5E3D ^ (spec.num_classes * 131 + spec.channel_count))
        model = ToySegmenter(
            num_classes=spec.num_classes,
            k_s=spec.channel_count,
            width=max(16, spec.channel_count),
        )
    return model


register_provider("toy", _build_toy)


def build_provider(spec: SemanticProviderSpec) -> nn.Module:
    """Instantiate a registered provider; load its checkpoint when given."""
    if spec.provider_id not in _PROVIDERS:
        raise ValidationError(
            f"unknown provider {spec.provider_id!r}; registered: {sorted(_PROVIDERS)}"
        )
    model = _PROVIDERS[spec.provider_id](spec)
    if spec.checkpoint_path is not None:
        if not os.path.exists(spec.checkpoint_path):
            raise ConfigurationError(f"provider checkpoint missing: {spec.checkpoint_path}")
        state = torch.load(spec.checkpoint_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def provider_features(provider: nn.Module, batch: torch.Tensor) -> dict[int, torch.Tensor]:
    """Frozen pyramid extraction on an NCHW batch (no gradients flow back)."""
    was_training = provider.training
    provider.eval()
    with torch.no_grad():
        feats = provider.features(batch)
    if was_training:
        provider.train()
    return feats


def extract_semantics(
    image: np.ndarray,
    spec: SemanticProviderSpec,
    provider: nn.Module | None = None,
) -> SemanticPyramid:
    """Run the frozen provider on one H x W x C image plane."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DimensionError(f"expected H x W x C image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ValidationError(f"image dims must be divisible by 32, got {h}x{w}")
    if provider is None:
        provider = build_provider(spec)
    batch = torch.from_numpy(image.transpose(2, 0, 1)[None]).float()
    feats = provider_features(provider, batch)
    maps = {s: t[0].permute(1, 2, 0).numpy().astype(np.float64) for s, t in feats.items()}
    pyramid = SemanticPyramid(maps)
    pyramid.validate((h, w))
    return pyramid


@dataclass
class SegTrainConfig:
    steps: int = 300
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    num_classes: int = 8
    channel_count: int = 32

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")


def save_provider_checkpoint(
    model: ToySegmenter, path: str | os.PathLike, provider_id: str = "toy"
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "provider_id": provider_id,
        "num_classes": model.num_classes,
        "k_s": model.k_s,
        "version": CHECKPOINT_VERSION,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_provider_spec(path: str | os.PathLike) -> SemanticProviderSpec:
    """Rebuild the provider spec from a checkpoint's JSON sidecar."""
    sidecar_path = str(path) + ".json"
    if not os.path.exists(sidecar_path):
        raise ConfigurationError(f"checkpoint sidecar missing: {sidecar_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    return SemanticProviderSpec(
        provider_id=meta["provider_id"],
        num_classes=meta["num_classes"],
        channel_count=meta["k_s"],
        checkpoint_path=str(path),
    )


def train_toy_segmenter(
    dataset: list[tuple[np.ndarray, np.ndarray]],
    config: SegTrainConfig,
    out_path: str | os.PathLike,
) -> tuple[str, list[float]]:
    """Fit the toy segmenter with per-pixel cross-entropy.

    dataset: (image H x W x C, mask H x W of ints in [0, num_classes)) pairs.
    Returns the checkpoint path and the per-step loss trace.
    """
    if not dataset:
        raise ValidationError("segmenter training needs a nonempty dataset")
    torch.manual_seed(config.seed)
    model = ToySegmenter(num_classes=config.num_classes, k_s=config.channel_count)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)

    images = torch.stack(
        [torch.from_numpy(np.asarray(img).transpose(2, 0, 1)).float() for img, _ in dataset]
    )
    masks = torch.stack([torch.from_numpy(np.asarray(m).astype(np.int64)) for _, m in dataset])
    if int(masks.max()) >= config.num_classes:
        raise ValidationError(
            f"mask labels reach {int(masks.max())} but num_classes={config.num_classes}"
        )

    losses: list[float] = []
    n = len(dataset)
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        batch = images[idx]
        target = masks[idx]
        logits = model.logits(batch)
        loss = F.cross_entropy(logits, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    model.eval()
    save_provider_checkpoint(model, out_path)
    return str(out_path), losses
