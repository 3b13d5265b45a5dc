"""Ablation grids over loss kind, perceptual weight, stream count and cascade count.

Each axis yields one table: rows are datasets, columns are variants, cells
are ``psnr/ssim`` on the dataset's test images or ``FAIL``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .blocks import ConfigError
from .config import RunConfig, build_run_config
from .data import RainPair
from .network import MHDerainNet
from .training import evaluate, format_cell, train

logger = logging.getLogger(__name__)

AXES = ("loss_kind", "lambda_p", "stream_count", "cascade_count")
DEFAULT_VALUES = {
    "loss_kind": ("mse", "ssim", "mse+perceptual", "ssim+perceptual"),
    "lambda_p": (0.1, 1.0, 10.0),
    "stream_count": ((3,), (3, 5), (3, 5, 7), (1, 3, 5, 7)),
    "cascade_count": (4, 5, 6, 7),
}
LOSS_LABELS = {"mse": "L_mse", "ssim": "L_ssim", "mse+perceptual": "L_mse+L_p",
               "ssim+perceptual": "L_ssim+L_p"}
STREAM_LABELS = {1: "MHDN-ss", 2: "MHDN-ds", 3: "MHDN-ts", 4: "MHDN-fs"}
# long shortcuts of the full six-cascade stream; cascade variants keep those that fit
FULL_SHORTCUTS = ((2, 4), (1, 5))
FAIL = "FAIL"

# Small enough that the four default grids finish in minutes on one CPU.
DESK_ENTRIES = {
    "net.stream_kernels": "3,5,7",
    "net.cascades_per_stream": "2",
    "net.blocks_per_cascade": "1",
    "net.residual_width": "8",
    "net.dense_growth": "4",
    "net.bottleneck_width": "8",
    "net.shortcut_pairs": "none",
    "net.fine_tune_width": "8",
    "train.batch_size": "4",
    "train.epochs": "8",
    "train.patches_per_image": "2",
    "train.patch_size": "32",
    "train.val_fraction": "0",
    "train.eval_every_epochs": "0",
    "data.synth_count": "4",
    "data.synth_size": "48",
}
DESK_TEST_COUNT = 2


def desk_base() -> RunConfig:
    return build_run_config(DESK_ENTRIES)


def variant_label(axis: str, value) -> str:
    if axis == "loss_kind":
        return LOSS_LABELS.get(value, value)
    if axis == "lambda_p":
        return f"lambda_p={float(value):g}"
    if axis == "stream_count":
        return STREAM_LABELS.get(len(value), f"MHDN-{len(value)}streams")
    if axis == "cascade_count":
        return f"MHDN-{int(value)}"
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def apply_variant(base: RunConfig, axis: str, value) -> RunConfig:
    net, tr = base.network, base.train
    if axis == "loss_kind":
        tr = replace(tr, loss=replace(tr.loss, loss_kind=value))
    elif axis == "lambda_p":
        tr = replace(tr, loss=replace(tr.loss, loss_kind="ssim+perceptual", lambda_p=float(value)))
    elif axis == "stream_count":
        net = replace(net, stream_kernels=tuple(value))
    elif axis == "cascade_count":
        n = int(value)
        pairs = tuple(p for p in FULL_SHORTCUTS if p[1] <= n)
        net = replace(net, cascades_per_stream=n, shortcut_pairs=pairs)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    return replace(base, network=net, train=tr)


def parse_axis_values(axis: str, text: str) -> tuple:
    """``mse,ssim`` / ``0.1,1`` / ``3;3,5`` (kernel lists split by ';') / ``4,5``."""
    try:
        if axis == "loss_kind":
            return tuple(v.strip() for v in text.split(","))
        if axis == "lambda_p":
            return tuple(float(v) for v in text.split(","))
        if axis == "stream_count":
            return tuple(tuple(int(k) for k in group.split(",")) for group in text.split(";"))
        if axis == "cascade_count":
            return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"cannot parse values {text!r} for axis {axis}") from exc
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


@dataclass
class AblationGrid:
    axis: str
    values: tuple = ()
    base: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; expected one of {AXES}")
        if not self.values:
            self.values = DEFAULT_VALUES[self.axis]
        labels = self.labels
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate variants on axis {self.axis}: {labels}")

    @property
    def labels(self) -> list[str]:
        return [variant_label(self.axis, v) for v in self.values]

    def variants(self) -> list[tuple[str, RunConfig]]:
        return [(variant_label(self.axis, v), apply_variant(self.base, self.axis, v))
                for v in self.values]


@dataclass
class AblationDataset:
    name: str
    train: Sequence[RainPair]
    test: Sequence[RainPair]


@dataclass
class AblationTable:
    axis: str
    columns: list[str]
    rows: dict[str, list[str]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", *self.columns])
        for name, cells in self.rows.items():
            w.writerow([name, *cells])
        return buf.getvalue()


def run_cell(cfg: RunConfig, dataset: AblationDataset, out_dir: Path | None = None) -> str:
    """Train one variant from scratch and score it on the test images."""
    torch.manual_seed(cfg.train.seed)
    model = MHDerainNet(cfg.network)
    if out_dir is not None:
        cfg.write(out_dir)
    train(model, dataset.train, cfg.train, out_dir=out_dir)
    report = evaluate(model, dataset.test, cfg.train.loss.ssim)
    if out_dir is not None:
        report.write_csv(out_dir / "metrics.csv")
    if not (math.isfinite(report.mean_psnr) and math.isfinite(report.mean_ssim)):
        raise FloatingPointError(f"non-finite metrics {report.mean_psnr}/{report.mean_ssim}")
    return report.summary()


def run_grid(grid: AblationGrid, datasets: Sequence[AblationDataset],
             out_dir: str | Path | None = None) -> AblationTable:
    rows = {}
    variants = grid.variants()
    for ds in datasets:
        cells = []
        for label, cfg in variants:
            cell_dir = Path(out_dir) / "cells" / grid.axis / label / ds.name if out_dir else None
            try:
                cells.append(run_cell(cfg, ds, cell_dir))
            except Exception as exc:  # one failed variant must not sink the grid
                logger.error("ablation cell %s / %s / %s failed: %s", grid.axis, label, ds.name, exc)
                cells.append(FAIL)
            logger.info("%s %s %s: %s", grid.axis, ds.name, label, cells[-1])
        rows[ds.name] = cells
    return AblationTable(grid.axis, grid.labels, rows)
