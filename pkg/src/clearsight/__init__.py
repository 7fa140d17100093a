"""Restoration-then-detection pipeline for adverse-weather imagery.

Modules:
    weathersim  additive fog/rain/snow degradation and pair datasets
    scenes      procedural detection fixtures with boxes and masks
    semprior    frozen multi-scale semantic feature providers
    ppu         restoration network (attention-embedded decoders)
    dtu         semantic-fused anchor-free detector
    metrics     PSNR / SSIM / IoU / COCO-style mAP references
    data        annotation schema, resizing contract, splits
    trainer     sequential two-stage training and benchmarking
    cli         command-line interface
"""

from .errors import ClearsightError, ConfigurationError, DimensionError, ValidationError
from .weathersim import (
    DegradationParams,
    WeatherRecipe,
    apply_degradation,
    degrade_image,
    generate_pair_dataset,
    make_recipe_params,
)
from .metrics import ApConfig, EvalReport, average_precision, evaluate, iou, psnr, ssim
from .semprior import (
    SemanticProviderSpec,
    SemanticPyramid,
    ToySegmenter,
    build_provider,
    extract_semantics,
    register_provider,
    train_toy_segmenter,
)
from .ppu import PPU, CharbonnierConfig, PPUConfig, charbonnier_loss, ppu_forward
from .dtu import (
    DTU,
    DTUConfig,
    DetectionBox,
    GroundTruthSet,
    PredictionTensor,
    assign_targets,
    detection_loss,
    dtu_forward,
    nms,
)
from .scenes import CLASS_NAMES, Scene, make_scene, make_scene_set
from .trainer import RunLog, TrainConfig, bench, train_dtu, train_ppu

__version__ = "0.1.0"

__all__ = [
    "ApConfig",
    "CLASS_NAMES",
    "CharbonnierConfig",
    "ClearsightError",
    "ConfigurationError",
    "DTU",
    "DTUConfig",
    "DegradationParams",
    "DetectionBox",
    "DimensionError",
    "EvalReport",
    "GroundTruthSet",
    "PPU",
    "PPUConfig",
    "PredictionTensor",
    "RunLog",
    "Scene",
    "SemanticProviderSpec",
    "SemanticPyramid",
    "ToySegmenter",
    "TrainConfig",
    "ValidationError",
    "WeatherRecipe",
    "apply_degradation",
    "assign_targets",
    "average_precision",
    "bench",
    "build_provider",
    "charbonnier_loss",
    "degrade_image",
    "detection_loss",
    "dtu_forward",
    "evaluate",
    "extract_semantics",
    "generate_pair_dataset",
    "iou",
    "make_recipe_params",
    "make_scene",
    "make_scene_set",
    "nms",
    "ppu_forward",
    "psnr",
    "register_provider",
    "ssim",
    "train_dtu",
    "train_ppu",
    "train_toy_segmenter",
]
