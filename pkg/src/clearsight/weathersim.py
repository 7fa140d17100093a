"""Synthetic weather degradation.

Degraded frames follow the additive scattering model

    I(x) = B(x) + sum_i S_i(x) * m(x) + A * (1 - m(x))

with clean image B, occluder layers S_i, transmission map m and atmospheric
light A. The final frame is clamped to [0, 1]; that clamp is the only
nonlinearity. Recipes generate the (A, m, S_i) triple per weather kind,
deterministically from a seed.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError
from .images import check_image_plane, load_image, save_image

log = logging.getLogger(__name__)

WEATHER_KINDS = ("fog", "rain", "snow", "clear")

# Default sky luminance per weather kind (fog is brighter than rain/snow).
ATMOSPHERIC_LIGHT = {"fog": 0.9, "rain": 0.75, "snow": 0.75, "clear": 0.9}

# Fallback linear depth ramp (meters) used for fog when no depth map is given:
# image top is far away (sky), bottom is near the camera.
FALLBACK_DEPTH_FAR = 300.0
FALLBACK_DEPTH_NEAR = 10.0


@dataclass
class DegradationParams:
    """Inputs of the additive degradation model.

    atmospheric_light: scalar or per-channel triple in [0, 1]
    transmission_map:  H x W array in [0, 1]
    scattering_layers: list of H x W x C arrays in [0, 1] (may be empty)
    """

    atmospheric_light: float | np.ndarray
    transmission_map: np.ndarray
    scattering_layers: list[np.ndarray] = field(default_factory=list)

    def validate(self, image_shape: tuple[int, ...]) -> None:
        h, w = image_shape[0], image_shape[1]
        m = np.asarray(self.transmission_map)
        if m.shape != (h, w):
            raise DimensionError(
                f"transmission map shape {m.shape} does not match image {h}x{w}"
            )
        if m.min() < 0.0 or m.max() > 1.0:
            raise ValidationError("transmission values must lie in [0, 1]")
        a = np.asarray(self.atmospheric_light, dtype=np.float64)
        if a.ndim not in (0, 1) or (a.ndim == 1 and a.shape[0] != image_shape[-1]):
            raise DimensionError(
                f"atmospheric light must be scalar or per-channel, got shape {a.shape}"
            )
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValidationError("atmospheric light must lie in [0, 1]")
        for i, s in enumerate(self.scattering_layers):
            s = np.asarray(s)
            if s.shape != image_shape:
                raise DimensionError(
                    f"scattering layer {i} shape {s.shape} does not match image {image_shape}"
                )
            if s.min() < 0.0 or s.max() > 1.0:
                raise ValidationError(f"scattering layer {i} values must lie in [0, 1]")


@dataclass
class WeatherRecipe:
    """Parameterizes how (A, m, S_i) are generated for one weather kind.

    kind "clear" forces intensity 0 so the degradation is the identity.
    Fog uses m = exp(-beta * intensity * depth); without a depth map a linear
    top-far / bottom-near ramp stands in.
    """

    kind: str
    intensity: float = 1.0
    seed: int = 0
    fog_beta: float = 0.01
    depth_map: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in WEATHER_KINDS:
            raise ValidationError(
                f"unknown weather kind {self.kind!r}; expected one of {WEATHER_KINDS}"
            )
        if self.kind == "clear":
            self.intensity = 0.0
        if self.intensity < 0:
            raise ValidationError("intensity must be >= 0")


def apply_degradation(clean: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Evaluate I = clamp(B + sum_i S_i*m + A*(1-m), 0, 1).

    Deterministic; raises DimensionError / ValidationError on bad inputs.
    """
    clean = check_image_plane(clean, "clean image")
    params.validate(clean.shape)
    m = np.asarray(params.transmission_map, dtype=np.float64)
    if clean.ndim == 3:
        m = m[:, :, None]
    a = np.asarray(params.atmospheric_light, dtype=np.float64)
    out = clean.astype(np.float64)
    for s in params.scattering_layers:
        out = out + np.asarray(s, dtype=np.float64) * m
    out = out + a * (1.0 - m)
    return np.clip(out, 0.0, 1.0)


def make_recipe_params(recipe: WeatherRecipe, image_shape: tuple[int, ...]) -> DegradationParams:
    """Generate degradation parameters for a recipe, deterministically per seed."""
    if len(image_shape) not in (2, 3) or image_shape[0] <= 0 or image_shape[1] <= 0:
        raise ValidationError(f"image shape must be positive H x W (x C), got {image_shape}")
    h, w = image_shape[0], image_shape[1]
    channels = image_shape[2] if len(image_shape) == 3 else 1
    rng = np.random.default_rng(recipe.seed)
    a = ATMOSPHERIC_LIGHT[recipe.kind]

    if recipe.kind == "clear":
        return DegradationParams(a, np.ones((h, w)), [])

    if recipe.kind == "fog":
        depth = recipe.depth_map
        if depth is None:
            depth = np.broadcast_to(
                np.linspace(FALLBACK_DEPTH_FAR, FALLBACK_DEPTH_NEAR, h)[:, None], (h, w)
            )
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (h, w):
            raise DimensionError(f"depth map shape {depth.shape} does not match {h}x{w}")
        m = np.exp(-recipe.fog_beta * recipe.intensity * depth)
        return DegradationParams(a, np.clip(m, 0.0, 1.0), [])

    if recipe.kind == "rain":
        m = np.full((h, w), float(np.exp(-0.08 * recipe.intensity)))
        layers = [
            _rain_layer(rng, h, w, channels, recipe.intensity, near=False),
            _rain_layer(rng, h, w, channels, recipe.intensity, near=True),
        ]
        return DegradationParams(a, m, layers)

    # snow: three particle size classes, far to near
    m = np.full((h, w), float(np.exp(-0.06 * recipe.intensity)))
    layers = [
        _snow_layer(rng, h, w, channels, recipe.intensity, r_lo=1.0, r_hi=2.0, gain=0.45),
        _snow_layer(rng, h, w, channels, recipe.intensity, r_lo=2.0, r_hi=4.0, gain=0.7),
        _snow_layer(rng, h, w, channels, recipe.intensity, r_lo=4.0, r_hi=6.0, gain=0.95),
    ]
    return DegradationParams(a, m, layers)


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized rasterized line segment through the kernel center."""
    half = (length - 1) / 2.0
    size = length
    kern = np.zeros((size, size))
    theta = np.deg2rad(angle_deg)
    for t in np.linspace(-half, half, 4 * length):
        x = half + t * np.cos(theta)
        y = half - t * np.sin(theta)
        xi, yi = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - xi, y - yi
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= yi + dy < size and 0 <= xi + dx < size:
                    kern[yi + dy, xi + dx] += wy * wx
    return kern / kern.sum()


def _rain_layer(
    rng: np.random.Generator, h: int, w: int, channels: int, intensity: float, near: bool
) -> np.ndarray:
    # Streak angle stays within 70..110 degrees from horizontal.
    angle = rng.uniform(70.0, 110.0)
    density = (0.0012 if near else 0.003) * min(intensity, 4.0)
    length = max(3, int((14 if near else 7) * min(intensity, 4.0) ** 0.5))
    seeds = (rng.random((h, w)) < density).astype(np.float64)
    seeds *= rng.uniform(0.6, 1.0, size=(h, w))
    streaks = ndimage.convolve(seeds, _line_kernel(length, angle) * length, mode="constant")
    gain = 0.85 if near else 0.55
    layer = np.clip(streaks * gain, 0.0, 1.0)
    if channels > 1:
        layer = np.repeat(layer[:, :, None], channels, axis=2)
    return layer


def _snow_layer(
    rng: np.random.Generator,
    h: int,
    w: int,
    channels: int,
    intensity: float,
    r_lo: float,
    r_hi: float,
    gain: float,
) -> np.ndarray:
    layer = np.zeros((h, w))
    count = int(0.0008 * h * w * min(intensity, 4.0) * (6.0 / (r_lo + r_hi)))
    ys = rng.uniform(0, h, count)
    xs = rng.uniform(0, w, count)
    radii = rng.uniform(r_lo, r_hi, count)
    aspects = rng.uniform(0.6, 1.0, count)
    angles = rng.uniform(0, np.pi, count)
    for cy, cx, r, asp, ang in zip(ys, xs, radii, aspects, angles):
        ry, rx = r, r * asp
        pad = int(np.ceil(3 * r))
        y0, y1 = max(0, int(cy) - pad), min(h, int(cy) + pad + 1)
        x0, x1 = max(0, int(cx) - pad), min(w, int(cx) + pad + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        dist2 = (u / rx) ** 2 + (v / ry) ** 2
        layer[y0:y1, x0:x1] += np.exp(-dist2 * 2.0)
    layer = np.clip(ndimage.gaussian_filter(layer, sigma=0.6) * gain, 0.0, 1.0)
    if channels > 1:
        layer = np.repeat(layer[:, :, None], channels, axis=2)
    return layer


def degrade_image(clean: np.ndarray, recipe: WeatherRecipe) -> np.ndarray:
    """Convenience wrapper: recipe -> params -> degraded frame."""
    params = make_recipe_params(recipe, clean.shape)
    return apply_degradation(clean, params)


def generate_pair_dataset(
    clean_dir: str | os.PathLike,
    recipes: list[WeatherRecipe],
    out_dir: str | os.PathLike,
) -> list[dict]:
    """Write degraded/clean pairs for every (image, recipe) combination.

    Returns the manifest: one record per pair with
    {clean_path, degraded_path, kind, intensity, seed}, paths relative to
    out_dir. Unreadable inputs are skipped with a logged warning.
    """
    clean_dir = Path(clean_dir)
    out_dir = Path(out_dir)
    if not recipes:
        raise ValidationError("at least one recipe is required")
    files = sorted(p for p in clean_dir.iterdir() if p.is_file())
    if not files:
        raise ValidationError(f"no input files in {clean_dir}")

    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "degraded").mkdir(parents=True, exist_ok=True)
    manifest: list[dict] = []
    index = 0
    decoded_any = False
    for path in files:
        try:
            clean = load_image(path)
        except ValidationError:
            log.warning("skipping unreadable image: %s", path)
            continue
        decoded_any = True
        clean_rel = f"clean/{path.stem}.png"
        save_image(out_dir / clean_rel, clean)
        for recipe in recipes:
            seed = recipe.seed + index
            per_image = WeatherRecipe(
                kind=recipe.kind,
                intensity=recipe.intensity,
                seed=seed,
                fog_beta=recipe.fog_beta,
                depth_map=recipe.depth_map,
            )
            degraded = degrade_image(clean, per_image)
            degraded_rel = f"degraded/{path.stem}__{recipe.kind}_{seed}.png"
            save_image(out_dir / degraded_rel, degraded)
            manifest.append(
                {
                    "clean_path": clean_rel,
                    "degraded_path": degraded_rel,
                    "kind": recipe.kind,
                    "intensity": recipe.intensity,
                    "seed": seed,
                }
            )
        index += 1
    if not decoded_any:
        raise ValidationError(f"no decodable images in {clean_dir}")
    write_manifest(out_dir / "pairs_manifest.jsonl", manifest)
    return manifest


def write_manifest(path: str | os.PathLike, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
