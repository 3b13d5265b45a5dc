"""Optimization loop, evaluation, checkpoints and the learning-rate schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import zlib
from decimal import Decimal
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .blocks import ConfigError
from .data import RainPair, extract_patches, iter_batches
from .losses import HybridLoss, LossConfig, SsimParams, psnr, ssim
from .network import MHDerainNet, NetworkConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HISTORY_HEADER = "epoch,lr,mean_loss,mean_ssim_val,mean_psnr_val"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    decay_factor: float = 0.2
    decay_every_epochs: int = 30
    batch_size: int = 14
    epochs: int = 100
    patches_per_image: int = 15
    patch_size: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every_epochs: int = 1
    val_fraction: float = 0.1
    max_steps: int | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        positive = ("initial_lr", "decay_every_epochs", "batch_size", "epochs",
                    "patches_per_image", "patch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.eval_every_epochs < 0:
            raise ConfigError("eval_every_epochs must be >= 0 (0 disables evaluation)")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig.from_dict(d.get("loss", {}))
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Step decay: ``initial_lr * decay_factor ** floor(epoch / decay_every_epochs)``.

    The product is taken in decimal on the values as written and rounded once,
    so 1e-3 * 0.2**2 is exactly ``4e-05`` rather than ``4.000000000000001e-05``.
    """
    k = epoch // cfg.decay_every_epochs
    return float(Decimal(repr(cfg.initial_lr)) * Decimal(repr(cfg.decay_factor)) ** k)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    rows: list[tuple[str, float, float]]
    config: dict = field(default_factory=dict)

    @property
    def psnr_values(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows], dtype=np.float64)

    @property
    def ssim_values(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=np.float64)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def std_psnr(self) -> float:
        return float(np.std(self.psnr_values))

    @property
    def std_ssim(self) -> float:
        return float(np.std(self.ssim_values))

    def summary(self) -> str:
        return format_cell(self.mean_psnr, self.mean_ssim)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "psnr_db", "ssim"])
        for ident, p, s in self.rows:
            writer.writerow([ident, repr(p), repr(s)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def format_cell(psnr_db: float, ssim_value: float) -> str:
    return f"{psnr_db:.2f}/{ssim_value:.3f}"


def _score(pred: torch.Tensor, target: torch.Tensor, p: SsimParams) -> tuple[float, float]:
    return psnr(pred, target), float(ssim(pred.double(), target.double(), p))


def evaluate(model: MHDerainNet | None, dataset: Sequence[RainPair],
             ssim_params: SsimParams = SsimParams()) -> MetricsReport:
    """Full-image PSNR/SSIM of the derained output against ground truth.

    ``model=None`` scores the rainy inputs themselves (the degradation floor).
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    rows = []
    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()
    try:
        with torch.no_grad():
            for pair in dataset:
                x = torch.from_numpy(np.asarray(pair.rainy, dtype=np.float32))[None]
                y = torch.from_numpy(np.asarray(pair.clean, dtype=np.float32))[None]
                pred = model(x).derained if model is not None else x
                rows.append((pair.identifier, *_score(pred, y, ssim_params)))
    finally:
        if model is not None:
            model.train(was_training)
    return MetricsReport(rows)


# ---------------------------------------------------------------------------
# checkpoints


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def checkpoint_bytes(state: dict) -> bytes:
    buf = io.BytesIO()
    torch.save(state, buf)
    return buf.getvalue()


def save_checkpoint(path: str | Path, state: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, checkpoint_bytes(state))
    return path


def make_checkpoint(model: MHDerainNet, optimizer: torch.optim.Optimizer | None,
                    train_cfg: TrainConfig, epoch: int, step: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "network_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "rng_state": torch.get_rng_state(),
    }


def load_checkpoint(path: str | Path, network_config: NetworkConfig | None = None) -> dict:
    try:
        state = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if state.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {state.get('format_version')} != supported {FORMAT_VERSION}"
        )
    if network_config is not None and state["network_config"] != network_config.to_dict():
        raise CheckpointError(
            "network config mismatch:\n" + config_diff(state["network_config"], network_config.to_dict())
        )
    return state


def config_diff(saved: dict, requested: dict, prefix: str = "") -> str:
    lines = []
    for key in sorted(set(saved) | set(requested)):
        a, b = saved.get(key), requested.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            sub = config_diff(a, b, f"{prefix}{key}.")
            if sub:
                lines.append(sub)
        elif a != b:
            lines.append(f"  {prefix}{key}: checkpoint={a!r} requested={b!r}")
    return "\n".join(lines)


def model_from_checkpoint(state: dict) -> MHDerainNet:
    model = MHDerainNet(NetworkConfig.from_dict(state["network_config"]))
    model.load_state_dict(state["model"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    mean_ssim_val: float
    mean_psnr_val: float

    def line(self) -> str:
        return ",".join([str(self.epoch), repr(self.lr), repr(self.mean_loss),
                         repr(self.mean_ssim_val), repr(self.mean_psnr_val)])


def split_by_hash(dataset: Sequence[RainPair], val_fraction: float) -> tuple[list, list]:
    """Deterministic train/val split keyed on a CRC of each identifier."""
    train, val = [], []
    for pair in dataset:
        bucket = zlib.crc32(pair.identifier.encode()) % 1000
        (val if bucket < val_fraction * 1000 else train).append(pair)
    return train, val


@dataclass
class TrainResult:
    checkpoint: dict
    history: list[EpochRecord]
    steps: int


def train(model: MHDerainNet, dataset: Sequence[RainPair], cfg: TrainConfig,
          out_dir: str | Path | None = None, val_dataset: Sequence[RainPair] | None = None,
          resume: dict | str | Path | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train ``model`` in place with Adam and the step learning-rate schedule.

    Patches are redrawn every epoch from a generator seeded by
    ``(cfg.seed, epoch)``, so a run resumed from a checkpoint replays the
    exact batches of an uninterrupted one. When ``out_dir`` is given, a
    checkpoint is rewritten after every epoch and one history line appended.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if getattr(dataset, "eval_only", False):
        raise ValueError("dataset is marked eval-only")
    if val_dataset is None:
        train_pairs, val_pairs = split_by_hash(dataset, cfg.val_fraction)
        if not train_pairs:
            train_pairs, val_pairs = list(dataset), []
    else:
        train_pairs, val_pairs = list(dataset), list(val_dataset)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, betas=cfg.adam_betas,
                                 eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    start_epoch, step = 0, 0
    if resume is not None:
        state = resume if isinstance(resume, dict) else load_checkpoint(resume, model.cfg)
        if state["network_config"] != model.cfg.to_dict():
            raise CheckpointError("checkpoint network config does not match the model")
        model.load_state_dict(state["model"])
        if state["optimizer"] is not None:
            optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng_state"])
        start_epoch, step = state["epoch"], state["step"]

    loss_fn = HybridLoss(cfg.loss)
    history_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        history_path = out_dir / "history.csv"
        ckpt_path = out_dir / "checkpoint.pt"
        if not history_path.exists() or resume is None:
            history_path.write_text(HISTORY_HEADER + "\n")

    history = []
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        lr = lr_schedule(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        patches = [p for pair in train_pairs
                   for p in extract_patches(pair, cfg.patches_per_image, cfg.patch_size, rng)]
        patches = [patches[i] for i in rng.permutation(len(patches))]

        model.train()
        losses = []
        for b, (xb, yb) in enumerate(iter_batches(patches, cfg.batch_size)):
            x, y = torch.from_numpy(xb), torch.from_numpy(yb)
            loss, parts = loss_fn(model(x).derained, y)
            if not torch.isfinite(loss):
                detail = ", ".join(f"{k}={v.item():.6g}" for k, v in parts.items())
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {detail}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            losses.append(loss.item())
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

        val_ssim = val_psnr = math.nan
        if val_pairs and cfg.eval_every_epochs and (epoch + 1) % cfg.eval_every_epochs == 0:
            report = evaluate(model, val_pairs, cfg.loss.ssim)
            val_ssim, val_psnr = report.mean_ssim, report.mean_psnr
        record = EpochRecord(epoch + 1, lr, float(np.mean(losses)), val_ssim, val_psnr)
        history.append(record)
        logger.info("epoch %d lr %.3g loss %.5f val %s", record.epoch, lr, record.mean_loss,
                    format_cell(val_psnr, val_ssim))
        if on_epoch is not None:
            on_epoch(record)
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, make_checkpoint(model, optimizer, cfg, epoch + 1, step))
            with open(history_path, "a") as fh:
                fh.write(record.line() + "\n")

    return TrainResult(make_checkpoint(model, optimizer, cfg, start_epoch + len(history), step),
                       history, step)


def read_history(path: str | Path) -> list[EpochRecord]:
    """Parse a history file, skipping (and logging) malformed lines."""
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line == HISTORY_HEADER:
            continue
        parts = line.split(",")
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            records.append(EpochRecord(int(parts[0]), *(float(v) for v in parts[1:])))
        except ValueError as exc:
            logger.warning("%s:%d: skipping malformed history line (%s)", path, n, exc)
    return records
