"""Restoration stage: U-shaped encoder plus attention-embedded decoders.

The encoder emits features at strides {1, 2, 4, 8, 16}. Each decoder step
upsamples, concatenates the skip features and the matching semantic map, and
gates the result with channel attention (semantics present) or depth-wise
separable attention (semantics absent; always at stride 1, where no semantic
map exists). The output head predicts a zero-initialized residual in logit
space so an untrained model is the identity and the [0, 1] range is built in.
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

from .errors import DimensionError, ValidationError
from .images import check_image_plane
from .semprior import SemanticPyramid

ENCODER_STRIDES = (1, 2, 4, 8, 16)
DECODER_TARGETS = (8, 4, 2, 1)
CHECKPOINT_VERSION = 1

# keeps logit(x) finite when the degraded input saturates at 0 or 1
_LOGIT_CLAMP = 1e-3


@dataclass
class CharbonnierConfig:
    epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValidationError("charbonnier epsilon must be > 0")


@dataclass
class PPUConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)  # per encoder stride
    k_s: int = 32
    reduction: int = 16
    charbonnier: CharbonnierConfig = field(default_factory=CharbonnierConfig)

    def __post_init__(self) -> None:
        if len(self.widths) != len(ENCODER_STRIDES):
            raise ValidationError(f"need {len(ENCODER_STRIDES)} widths, got {self.widths}")


@dataclass
class DecoderState:
    """Rolling decoder output; the stride halves at every step."""

    current: torch.Tensor
    stride: int


def charbonnier_loss(pred, target, cfg: CharbonnierConfig | None = None):
    """Mean over pixels of sqrt(diff^2 + eps^2) - eps; zero iff pred == target."""
    eps = (cfg or CharbonnierConfig()).epsilon
    if isinstance(pred, torch.Tensor) and isinstance(target, torch.Tensor):
        if pred.shape != target.shape:
            raise DimensionError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
        d = pred - target
        return (torch.sqrt(d * d + eps * eps) - eps).mean()
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(np.sqrt(d * d + eps * eps) - eps))


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation gating: y = x * sigmoid(W_ex relu(W_sq gap(x)))."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Linear(channels, hidden)
        self.excite = nn.Linear(hidden, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.squeeze.in_features:
            raise DimensionError(
                f"channel count {x.shape[1]} != attention width {self.squeeze.in_features}"
            )
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = self.gates(x)
        return x * g[:, :, None, None]


class DepthwiseSeparableAttention(nn.Module):
    """y = x * sigmoid(X'') with X'' from two depth-wise separable convolutions."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.dw1 = nn.Conv2d(channels, channels, kernel_size, padding=pad, groups=channels)
        self.pw1 = nn.Conv2d(channels, channels, 1)
        self.dw2 = nn.Conv2d(channels, channels, kernel_size, padding=pad, groups=channels)
        self.pw2 = nn.Conv2d(channels, channels, 1)

    def modulation(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.dw1.in_channels:
            raise DimensionError(
                f"channel count {x.shape[1]} != attention width {self.dw1.in_channels}"
            )
        return torch.sigmoid(self.pw2(self.dw2(self.pw1(self.dw1(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.modulation(x)


class AEDecoder(nn.Module):
    """One attention-embedded decoding step: stride i -> stride i/2.

    The semantic slot has a fixed channel budget; when the map is absent it is
    zero-filled and the depth-wise separable branch gates the features instead
    of channel attention. `last_attention` records which branch ran.
    """

    def __init__(self, in_ch: int, skip_ch: int, k_s: int, out_ch: int, reduction: int = 16):
        super().__init__()
        self.k_s = k_s
        self.up = nn.Conv2d(in_ch, skip_ch, 3, padding=1)
        total = skip_ch * 2 + k_s
        self.norm = nn.BatchNorm2d(total)
        self.cam = ChannelAttention(total, reduction)
        self.dsam = DepthwiseSeparableAttention(total)
        self.final = nn.Conv2d(total, out_ch, 3, padding=1)
        self.last_attention: str | None = None

    def forward(
        self,
        phi_i: torch.Tensor,
        phi_half: torch.Tensor,
        theta_half: torch.Tensor | None = None,
    ) -> torch.Tensor:
        up = self.up(F.interpolate(phi_i, scale_factor=2, mode="nearest"))
        if up.shape[-2:] != phi_half.shape[-2:]:
            raise DimensionError(
                f"skip map {tuple(phi_half.shape[-2:])} does not match upsampled "
                f"{tuple(up.shape[-2:])}"
            )
        if theta_half is not None and theta_half.shape[-2:] != phi_half.shape[-2:]:
            raise DimensionError("semantic map does not match the target stride dims")
        if theta_half is None:
            theta = up.new_zeros(up.shape[0], self.k_s, *up.shape[-2:])
            self.last_attention = "dsam"
        else:
            theta = theta_half
            self.last_attention = "cam"
        x = torch.cat([up, phi_half, theta], dim=1)
        x = self.norm(x)
        x = self.cam(x) if self.last_attention == "cam" else self.dsam(x)
        return self.final(x)


def _stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class PPU(nn.Module):
    """Full restoration network; `last_route` logs the attention path taken."""

    def __init__(self, config: PPUConfig | None = None):
        super().__init__()
        self.config = config or PPUConfig()
        w = self.config.widths
        self.stages = nn.ModuleList(
            [
                _stage(3, w[0], 1),
                _stage(w[0], w[1], 2),
                _stage(w[1], w[2], 2),
                _stage(w[2], w[3], 2),
                _stage(w[3], w[4], 2),
            ]
        )
        k_s, red = self.config.k_s, self.config.reduction
        # decoder steps 16->8, 8->4, 4->2, 2->1
        self.decoders = nn.ModuleList(
            [
                AEDecoder(w[4], w[3], k_s, w[3], red),
                AEDecoder(w[3], w[2], k_s, w[2], red),
                AEDecoder(w[2], w[1], k_s, w[1], red),
                AEDecoder(w[1], w[0], k_s, w[0], red),
            ]
        )
        self.head_attention = DepthwiseSeparableAttention(w[0])
        self.head_conv = nn.Conv2d(w[0], 3, 3, padding=1)
        nn.init.zeros_(self.head_conv.weight)
        nn.init.zeros_(self.head_conv.bias)
        self.last_route: list[tuple[int, str]] = []

    def encode(self, x: torch.Tensor) -> dict[int, torch.Tensor]:
        if x.shape[-2] % 16 or x.shape[-1] % 16:
            raise ValidationError(f"input dims must be divisible by 16, got {tuple(x.shape[-2:])}")
        out = {}
        h = x
        for stride, stage in zip(ENCODER_STRIDES, self.stages):
            h = stage(h)
            out[stride] = h
        return out

    def forward(
        self, x: torch.Tensor, semantics: dict[int, torch.Tensor] | None = None
    ) -> torch.Tensor:
        enc = self.encode(x)
        state = DecoderState(enc[16], 16)
        route: list[tuple[int, str]] = []
        for decoder, target in zip(self.decoders, DECODER_TARGETS):
            if target != state.stride // 2:
                raise ValidationError(f"decoder stride {state.stride} -> {target} is not a halving")
            theta = semantics.get(target) if semantics is not None else None
            state = DecoderState(decoder(state.current, enc[target], theta), target)
            route.append((target, decoder.last_attention))
        residual = self.head_conv(self.head_attention(state.current))
        route.append((1, "dsam"))
        self.last_route = route
        base = torch.clamp(x, _LOGIT_CLAMP, 1.0 - _LOGIT_CLAMP)
        return torch.sigmoid(torch.log(base / (1.0 - base)) + residual)


def ppu_forward(
    model: PPU, image: np.ndarray, semantics: SemanticPyramid | None
) -> np.ndarray:
    """Enhance one H x W x 3 image plane; dims must be divisible by 32."""
    image = check_image_plane(image, "image")
    if image.ndim != 3:
        raise DimensionError(f"expected H x W x C image, got {image.shape}")
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ValidationError(f"image dims must be divisible by 32, got {h}x{w}")
    sem_t = None
    if semantics is not None:
        semantics.validate((h, w))
        sem_t = {
            s: torch.from_numpy(m.transpose(2, 0, 1)[None].copy()).float()
            for s, m in semantics.maps.items()
        }
    batch = torch.from_numpy(image.transpose(2, 0, 1)[None]).float()
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(batch, sem_t)
    if was_training:
        model.train()
    return out[0].permute(1, 2, 0).numpy().astype(np.float64)


def save_ppu_checkpoint(model: PPU, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "epsilon": model.config.charbonnier.epsilon,
        "width_schedule": list(model.config.widths),
        "k_s": model.config.k_s,
        "reduction": model.config.reduction,
        "version": CHECKPOINT_VERSION,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_ppu_checkpoint(path: str | os.PathLike) -> PPU:
    sidecar_path = str(path) + ".json"
    if not os.path.exists(sidecar_path):
        raise ValidationError(f"checkpoint sidecar missing: {sidecar_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    config = PPUConfig(
        widths=tuple(meta["width_schedule"]),
        k_s=meta["k_s"],
        reduction=meta["reduction"],
        charbonnier=CharbonnierConfig(epsilon=meta["epsilon"]),
    )
    model = PPU(config)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model
