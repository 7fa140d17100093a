"""Text tables and loss-curve plots for run logs and evaluation reports."""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ValidationError
from .metrics import EvalReport
from .trainer import RunLog

ABLATION_ROWS = ("detector", "+ppu", "+ppu+sem", "full")


def restoration_table(rows: dict[str, dict[str, float]]) -> str:
    """PSNR/SSIM comparison table; rows map method name -> {PSNR, SSIM}."""
    lines = [f"{'method':<22} | {'PSNR':>8} | {'SSIM':>8}"]
    lines.append("-" * len(lines[0]))
    for name, vals in rows.items():
        lines.append(f"{name:<22} | {vals['PSNR']:>8.3f} | {vals['SSIM']:>8.4f}")
    return "\n".join(lines)


def ablation_table(per_config: dict[str, EvalReport]) -> str:
    """Four-row ablation table (detector / +ppu / +ppu+sem / full) by weather."""
    missing = [r for r in ABLATION_ROWS if r not in per_config]
    if missing:
        raise ValidationError(f"ablation table needs rows {ABLATION_ROWS}; missing {missing}")
    weathers = sorted({w for rep in per_config.values() for w in rep.per_weather})
    header = f"{'config':<12}"
    for w in weathers:
        header += f" | {w + ' mAP50':>14}"
    lines = [header, "-" * len(header)]
    for row in ABLATION_ROWS:
        rep = per_config[row]
        line = f"{row:<12}"
        for w in weathers:
            value = rep.per_weather.get(w, {}).get("mAP_50")
            line += f" | {value:>14.4f}" if value is not None else f" | {'--':>14}"
        lines.append(line)
    return "\n".join(lines)


def weather_map_table(report: EvalReport) -> str:
    return report.render_table()


def latency_table(bench_report: dict) -> str:
    """Four-row component latency breakdown."""
    names = {
        "detector": "detector",
        "ppu_detector": "ppu + detector",
        "ppu_detector_sem": "ppu + detector + sem",
        "full": "full (with adapter)",
    }
    lines = [f"{'component':<22} | {'median ms':>10} | {'p90 ms':>10}"]
    lines.append("-" * len(lines[0]))
    for key, label in names.items():
        row = bench_report["rows"][key]
        lines.append(f"{label:<22} | {row['median_ms']:>10.2f} | {row['p90_ms']:>10.2f}")
    lines.append(f"adapter increment: {bench_report['dab_increment_ms']:.2f} ms")
    return "\n".join(lines)


def plot_loss_curves(runlogs: dict[str, RunLog], out_path: str | os.PathLike) -> str:
    """Write a loss-per-step PNG for the given run logs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, log in runlogs.items():
        steps = [s["step"] for s in log.steps]
        ax.plot(steps, log.losses(), label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return str(out_path)
