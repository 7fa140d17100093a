"""Command-line entry point.

Subcommands: degrade, train-ppu, train-dtu, eval, detect, bench, report.
All side effects land under --out. A JSON config file plus repeatable
--override key=value flags feed the documented schema; unknown keys and type
mismatches are rejected. The SEMOD_CACHE environment variable names a
directory searched for semantic-provider checkpoints.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report as report_mod
from .boxes import center_to_corner
from .data import (
    DTU_SIZE,
    PPU_SIZE,
    load_annotations,
    load_pair_samples,
    resize_with_boxes,
)
from .dtu import DTU, DTUConfig, load_dtu_checkpoint, write_detections
from .errors import ClearsightError, ConfigurationError, ValidationError
from .images import load_image, save_image
from .metrics import EvalReport, evaluate
from .ppu import CharbonnierConfig, PPU, PPUConfig, load_ppu_checkpoint
from .scenes import CLASS_NAMES, make_scene_set
from .semprior import SemanticProviderSpec, build_provider, load_provider_spec
from .trainer import (
    DetectionSample,
    RunLog,
    TrainConfig,
    bench,
    predict_detections,
    train_dtu,
    train_ppu,
)
from .weathersim import WeatherRecipe, generate_pair_dataset

PROVIDER_CACHE_ENV = "SEMOD_CACHE"

# documented config schema: key -> (type, default)
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "device": (str, "cpu"),
    "ppu_size": (list, list(PPU_SIZE)),
    "dtu_size": (list, list(DTU_SIZE)),
    "ppu_widths": (list, [32, 64, 128, 256, 512]),
    "dtu_widths": (list, [32, 64, 128, 256, 512]),
    "k_s": (int, 32),
    "reduction": (int, 16),
    "num_classes": (int, len(CLASS_NAMES)),
    "semantic_mode": (str, "dab"),
    "charbonnier_eps": (float, 1e-3),
    "lr": (float, 5e-4),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "train_batch": (int, 12),
    "eval_batch": (int, 16),
    "epochs": (int, 50),
    "steps_per_epoch": (int, 0),  # 0 = no cap
    "grad_clip": (float, 10.0),
    "score_thresh": (float, 0.25),
    "iou_thresh": (float, 0.5),
    "provider_ckpt": (str, ""),
    "provider_classes": (int, len(CLASS_NAMES) + 1),
}

COMMANDS = ("degrade", "train-ppu", "train-dtu", "eval", "detect", "bench", "report")


@dataclass
class CommandSpec:
    """Parsed invocation: command, config file and key=value overrides."""

    command: str
    config_path: str | None = None
    overrides: list[str] = field(default_factory=list)

    def resolve(self) -> dict:
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}")
        config = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
        if self.config_path:
            try:
                with open(self.config_path) as fh:
                    loaded = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValidationError(f"config parse error at line {e.lineno}: {e.msg}")
            self._merge(config, loaded)
        for item in self.overrides:
            if "=" not in item:
                raise ValidationError(f"override must be key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self._merge(config, {key: value})
        return config

    @staticmethod
    def _merge(config: dict, updates: dict) -> None:
        for key, value in updates.items():
            if key not in CONFIG_SCHEMA:
                raise ValidationError(f"unknown config key {key!r}")
            expected, _ = CONFIG_SCHEMA[key]
            if expected is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, expected):
                raise ValidationError(
                    f"config key {key!r} expects {expected.__name__}, got {value!r}"
                )
            config[key] = value


def _check_device(config: dict) -> None:
    if config["device"] != "cpu":
        raise ConfigurationError("only device=cpu is supported in this build")


def _train_config(config: dict, stage: str) -> TrainConfig:
    return TrainConfig(
        stage=stage,
        lr=config["lr"],
        momentum=config["momentum"],
        weight_decay=config["weight_decay"],
        train_batch=config["train_batch"],
        eval_batch=config["eval_batch"],
        epochs=config["epochs"],
        seed=config["seed"],
        grad_clip=config["grad_clip"],
        steps_per_epoch=config["steps_per_epoch"] or None,
    )


def _ppu_config(config: dict) -> PPUConfig:
    return PPUConfig(
        widths=tuple(config["ppu_widths"]),
        k_s=config["k_s"],
        reduction=config["reduction"],
        charbonnier=CharbonnierConfig(epsilon=config["charbonnier_eps"]),
    )


def _dtu_config(config: dict, semantic_mode: str | None = None) -> DTUConfig:
    return DTUConfig(
        input_size=tuple(config["dtu_size"]),
        num_classes=config["num_classes"],
        widths=tuple(config["dtu_widths"]),
        k_s=config["k_s"],
        semantic_mode=semantic_mode or config["semantic_mode"],
        score_thresh=config["score_thresh"],
        iou_thresh=config["iou_thresh"],
    )


def _provider(config: dict):
    """Resolve the semantic provider: explicit ckpt, cache dir, or fresh."""
    path = config["provider_ckpt"]
    if not path:
        cache = os.environ.get(PROVIDER_CACHE_ENV)
        if cache:
            candidate = Path(cache) / "toy_provider.pt"
            if candidate.exists():
                path = str(candidate)
    if path:
        spec = load_provider_spec(path)
        return build_provider(spec)
    spec = SemanticProviderSpec(
        provider_id="toy",
        num_classes=config["provider_classes"],
        channel_count=config["k_s"],
    )
    print("note: no provider checkpoint found; using untrained prior", file=sys.stderr)
    return build_provider(spec)


def _detection_samples(root: str, config: dict) -> list[DetectionSample]:
    samples = load_annotations(Path(root) / "annotations.json")
    ph, pw = config["ppu_size"]
    dh, dw = config["dtu_size"]
    out = []
    for s in samples:
        image = load_image(s.image_path)
        resized, _ = resize_with_boxes(image, [], ph, pw)
        boxes = [
            (cx * dw / s.width, cy * dh / s.height, w * dw / s.width, h * dh / s.height)
            for cx, cy, w, h in s.boxes.boxes
        ]
        gt = type(s.boxes)(boxes, list(s.boxes.class_ids), s.boxes.num_classes)
        out.append(
            DetectionSample(image=resized, gt=gt, weather=s.weather, image_id=s.image_id)
        )
    return out


def _cmd_degrade(args, config: dict) -> int:
    kinds = [k.strip() for k in args.recipes.split(",") if k.strip()]
    recipes = [
        WeatherRecipe(kind=k, intensity=args.intensity, seed=config["seed"]) for k in kinds
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_pair_dataset(args.clean_dir, recipes, out)
    print(f"wrote {len(manifest)} pairs under {out}")
    return 0


def _cmd_train_ppu(args, config: dict) -> int:
    pairs = load_pair_samples(args.data)
    provider = _provider(config)
    ckpt, runlog = train_ppu(
        pairs,
        _train_config(config, "ppu"),
        args.out,
        provider=provider,
        ppu_config=_ppu_config(config),
    )
    print(f"best checkpoint: {ckpt} (final loss {runlog.losses()[-1]:.5f})")
    return 0


def _cmd_train_dtu(args, config: dict) -> int:
    samples = _detection_samples(args.data, config)
    provider = _provider(config)
    ppu = load_ppu_checkpoint(args.ppu_ckpt) if args.ppu_ckpt else None
    ckpt, runlog = train_dtu(
        samples,
        _train_config(config, "dtu"),
        args.out,
        ppu=ppu,
        provider=provider,
        dtu_config=_dtu_config(config),
    )
    print(f"best checkpoint: {ckpt} (final loss {runlog.losses()[-1]:.5f})")
    return 0


def _eval_one(
    dtu_model: DTU,
    ppu_model: PPU | None,
    provider,
    samples: list[DetectionSample],
    config: dict,
) -> EvalReport:
    detections = predict_detections(dtu_model, samples, ppu_model, provider)
    outputs, truths = {}, {}
    for sample, dets in zip(samples, detections):
        outputs[sample.image_id] = {
            "detections": [
                (d.class_id, center_to_corner((d.x, d.y, d.w, d.h)), d.score) for d in dets
            ]
        }
        truths[sample.image_id] = {
            "weather": sample.weather,
            "boxes": [
                (cid, center_to_corner(box))
                for box, cid in zip(sample.gt.boxes, sample.gt.class_ids)
            ],
        }
    return evaluate(outputs, truths)


def _cmd_eval(args, config: dict) -> int:
    samples = _detection_samples(args.data, config)
    provider = _provider(config)
    ppu_model = load_ppu_checkpoint(args.ppu_ckpt) if args.ppu_ckpt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ablate:
        ckpt_dir = Path(args.ckpt)
        required = {name: ckpt_dir / f"dtu_{name}.pt" for name in ("none", "raw", "dab")}
        missing = [str(p) for p in required.values() if not p.exists()]
        if missing:
            raise ValidationError(f"--ablate expects a directory with {sorted(required)}: missing {missing}")
        if ppu_model is None:
            raise ValidationError("--ablate needs --ppu-ckpt for the restoration rows")
        rows = {
            "detector": (load_dtu_checkpoint(required["none"]), None),
            "+ppu": (load_dtu_checkpoint(required["none"]), ppu_model),
            "+ppu+sem": (load_dtu_checkpoint(required["raw"]), ppu_model),
            "full": (load_dtu_checkpoint(required["dab"]), ppu_model),
        }
        per_config = {}
        for name, (model, maybe_ppu) in rows.items():
            per_config[name] = _eval_one(model, maybe_ppu, provider, samples, config)
            with open(out / f"eval_{name.replace('+', 'p')}.json", "w") as fh:
                fh.write(per_config[name].to_json())
        table = report_mod.ablation_table(per_config)
        (out / "ablation_table.txt").write_text(table + "\n")
        print(table)
        return 0
    model = load_dtu_checkpoint(args.ckpt)
    rep = _eval_one(model, ppu_model, provider, samples, config)
    (out / "eval_report.json").write_text(rep.to_json())
    table = rep.render_table()
    (out / "eval_table.txt").write_text(table + "\n")
    print(table)
    return 0


_BOX_COLORS = [
    (230, 60, 60), (60, 200, 60), (60, 90, 230), (230, 200, 50),
    (220, 60, 220), (60, 210, 210), (240, 140, 40),
]


def _cmd_detect(args, config: dict) -> int:
    import cv2

    image = load_image(args.image)
    ph, pw = config["ppu_size"]
    resized, _ = resize_with_boxes(image, [], ph, pw)
    provider = _provider(config)
    ppu_model = load_ppu_checkpoint(args.ppu_ckpt) if args.ppu_ckpt else None
    model = load_dtu_checkpoint(args.ckpt)
    sample = DetectionSample(image=resized, gt=_empty_gt(config), image_id=Path(args.image).stem)
    dets = predict_detections(model, [sample], ppu_model, provider)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det_path = out / f"{sample.image_id}_detections.jsonl"
    det_path.unlink(missing_ok=True)
    write_detections(det_path, sample.image_id, dets)

    dh, dw = config["dtu_size"]
    canvas, _ = resize_with_boxes(image, [], dh, dw)
    frame = np.ascontiguousarray((canvas * 255).astype(np.uint8))
    for d in dets:
        x1, y1, x2, y2 = (int(round(v)) for v in center_to_corner((d.x, d.y, d.w, d.h)))
        color = _BOX_COLORS[d.class_id % len(_BOX_COLORS)]
        cv2.rectangle(frame, (x1, y1), (x2, y2), color, 2)
        label = f"{CLASS_NAMES[d.class_id]} {d.score:.2f}"
        cv2.putText(frame, label, (x1, max(12, y1 - 4)), cv2.FONT_HERSHEY_SIMPLEX, 0.4, color, 1)
    png_path = out / f"{sample.image_id}_annotated.png"
    save_image(png_path, frame.astype(np.float64) / 255.0)
    print(f"{len(dets)} detections -> {det_path} and {png_path}")
    return 0


def _empty_gt(config: dict):
    from .dtu import GroundTruthSet

    return GroundTruthSet([], [], num_classes=config["num_classes"])


def _cmd_bench(args, config: dict) -> int:
    provider = _provider(config)
    ppu_model = load_ppu_checkpoint(args.ppu_ckpt) if args.ppu_ckpt else PPU(_ppu_config(config))
    dtu_model = load_dtu_checkpoint(args.ckpt) if args.ckpt else DTU(_dtu_config(config))
    ph, pw = config["ppu_size"]
    scenes = make_scene_set(args.frames, ph, pw, seed=config["seed"])
    images = [s.image for s in scenes]
    rep = bench(ppu_model, dtu_model, provider, images, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.json", "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
    table = report_mod.latency_table(rep)
    (out / "bench_table.txt").write_text(table + "\n")
    print(table)
    return 0


def _parse_named(pairs: list[str], what: str) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ValidationError(f"{what} must be name=path, got {item!r}")
        name, path = item.split("=", 1)
        if not os.path.exists(path):
            raise ValidationError(f"{what} file missing: {path}")
        out[name] = path
    return out


def _cmd_report(args, config: dict) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runlogs = {name: RunLog.read_jsonl(path) for name, path in _parse_named(args.runlog, "--runlog").items()}
    evals = {
        name: EvalReport.from_json(Path(path).read_text())
        for name, path in _parse_named(args.eval, "--eval").items()
    }
    wrote = []
    if evals:
        resto_rows = {
            name: {"PSNR": rep.per_weather[w]["PSNR"], "SSIM": rep.per_weather[w]["SSIM"]}
            for name, rep in evals.items()
            for w in rep.per_weather
            if rep.per_weather[w].get("PSNR") is not None
        }
        if resto_rows:
            path = out / "restoration_table.txt"
            path.write_text(report_mod.restoration_table(resto_rows) + "\n")
            wrote.append(path)
        for name, rep in evals.items():
            path = out / f"weather_map_{name}.txt"
            path.write_text(rep.render_table() + "\n")
            wrote.append(path)
        if all(k in evals for k in report_mod.ABLATION_ROWS):
            path = out / "ablation_table.txt"
            path.write_text(report_mod.ablation_table(evals) + "\n")
            wrote.append(path)
    if runlogs:
        wrote.append(Path(report_mod.plot_loss_curves(runlogs, out / "loss_curves.png")))
    for path in wrote:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clearsight", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default="out", help="output directory for all side effects")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--device", default=None, help="compute device (cpu)")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="config override, repeatable",
        )

    p = sub.add_parser("degrade", help="synthesize degraded/clean pairs")
    common(p)
    p.add_argument("--clean-dir", required=True, help="directory of clean images")
    p.add_argument("--recipes", required=True, help="comma list of fog,rain,snow,clear")
    p.add_argument("--intensity", type=float, default=1.0, help="weather intensity")

    p = sub.add_parser("train-ppu", help="train the restoration stage")
    common(p)
    p.add_argument("--data", required=True, help="pair dataset root (from degrade)")

    p = sub.add_parser("train-dtu", help="train the detection stage")
    common(p)
    p.add_argument("--data", required=True, help="detection dataset root (annotations.json)")
    p.add_argument("--ppu-ckpt", default=None, help="frozen restoration checkpoint")

    p = sub.add_parser("eval", help="evaluate detections (optionally the ablation grid)")
    common(p)
    p.add_argument("--ckpt", required=True, help="detector checkpoint (or directory with --ablate)")
    p.add_argument("--data", required=True, help="detection dataset root")
    p.add_argument("--ppu-ckpt", default=None, help="restoration checkpoint")
    p.add_argument("--ablate", action="store_true", help="run the four fusion-path configurations")

    p = sub.add_parser("detect", help="detect objects in one image")
    common(p)
    p.add_argument("--image", required=True, help="input image path")
    p.add_argument("--ckpt", required=True, help="detector checkpoint")
    p.add_argument("--ppu-ckpt", default=None, help="restoration checkpoint")

    p = sub.add_parser("bench", help="latency breakdown across component stacks")
    common(p)
    p.add_argument("--ckpt", default=None, help="detector checkpoint")
    p.add_argument("--ppu-ckpt", default=None, help="restoration checkpoint")
    p.add_argument("--repeats", type=int, default=5, help="timing repeats per frame")
    p.add_argument("--frames", type=int, default=2, help="number of synthetic frames")

    p = sub.add_parser("report", help="render tables and loss plots")
    common(p)
    p.add_argument("--runlog", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--eval", action="append", default=[], metavar="NAME=PATH")
    return parser


_HANDLERS = {
    "degrade": _cmd_degrade,
    "train-ppu": _cmd_train_ppu,
    "train-dtu": _cmd_train_dtu,
    "eval": _cmd_eval,
    "detect": _cmd_detect,
    "bench": _cmd_bench,
    "report": _cmd_report,
}


def run(argv: list[str] | None = None) -> int:
    """Dispatch a command; exit codes: 0 ok, 1 validation, 2 runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        spec = CommandSpec(
            command=args.command, config_path=args.config, overrides=list(args.override)
        )
        config = spec.resolve()
        if args.seed is not None:
            config["seed"] = args.seed
        if args.device is not None:
            config["device"] = args.device
        _check_device(config)
        return _HANDLERS[args.command](args, config)
    except (ClearsightError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
