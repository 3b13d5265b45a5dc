"""Training-history plots and a markdown summary."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import EpochRecord, read_history  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_PLOT = "loss.png"
METRICS_PLOT = "val_metrics.png"
SUMMARY = "summary.md"


class ReportError(RuntimeError):
    pass


def run_name(path: str | Path) -> str:
    """``runs/a/history.csv`` -> ``a``; any other file -> its stem."""
    path = Path(path)
    if path.name == "history.csv" and path.parent.name:
        return path.parent.name
    return path.stem


def load_runs(specs: Sequence[str]) -> list[tuple[str, list[EpochRecord]]]:
    """Each spec is ``path`` or ``name=path``. Runs without records are dropped."""
    runs = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = run_name(spec), spec
        if not Path(path).is_file():
            raise ReportError(f"history file not found: {path}")
        records = read_history(path)
        if records:
            runs.append((name, records))
        else:
            logger.warning("history %s has no epoch records; skipped", path)
    if not runs:
        raise ReportError("no epoch records in any history file; nothing to plot")
    return runs


def _best(values: list[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return max(finite) if finite else math.nan


def write_report(runs: Sequence[tuple[str, list[EpochRecord]]], out_dir: str | Path) -> list[Path]:
    if not runs:
        raise ReportError("no runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, recs in runs:
        ax.plot([r.epoch for r in recs], [r.mean_loss for r in recs], marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / LOSS_PLOT)
    plt.close(fig)

    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    for name, recs in runs:
        epochs = [r.epoch for r in recs]
        ax_p.plot(epochs, [r.mean_psnr_val for r in recs], marker=".", label=name)
        ax_s.plot(epochs, [r.mean_ssim_val for r in recs], marker=".", label=name)
    ax_p.set_xlabel("epoch")
    ax_p.set_ylabel("validation PSNR (dB)")
    ax_s.set_xlabel("epoch")
    ax_s.set_ylabel("validation SSIM")
    ax_p.legend()
    ax_s.legend()
    fig.tight_layout()
    fig.savefig(out_dir / METRICS_PLOT)
    plt.close(fig)

    lines = ["# Training summary", "",
             "| run | epochs | final loss | best val PSNR | best val SSIM |",
             "|---|---|---|---|---|"]
    for name, recs in runs:
        lines.append(f"| {name} | {recs[-1].epoch} | {recs[-1].mean_loss:.5f} | "
                     f"{_best([r.mean_psnr_val for r in recs]):.2f} | "
                     f"{_best([r.mean_ssim_val for r in recs]):.3f} |")
    lines += ["", f"![loss]({LOSS_PLOT})", "", f"![validation metrics]({METRICS_PLOT})", ""]
    (out_dir / SUMMARY).write_text("\n".join(lines))
    return [out_dir / LOSS_PLOT, out_dir / METRICS_PLOT, out_dir / SUMMARY]
