"""SSIM, perceptual and hybrid losses plus the PSNR/SSIM evaluation metrics.

The same windowed SSIM is used for training and for evaluation: an 11x11
Gaussian window (sigma 1.5), valid positions only, computed per RGB channel
and averaged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ConfigError, ShapeError

PSNR_CAP_DB = 100.0
LOSS_KINDS = ("mse", "ssim", "mse+perceptual", "ssim+perceptual")
EXTRACTOR_KINDS = ("pretrained", "random")

# torchvision's ImageNet statistics, used only for pretrained extractors
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightsError(RuntimeError):
    pass


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    window_sigma: float = 1.5
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigError(f"window_size must be odd, got {self.window_size}")
        if self.window_sigma <= 0 or self.k1 <= 0 or self.k2 <= 0 or self.data_range <= 0:
            raise ConfigError("window_sigma, k1, k2 and data_range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass(frozen=True)
class PerceptualConfig:
    extractor_kind: str = "random"
    tap_layer: str = "relu2_2"
    weights_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.extractor_kind not in EXTRACTOR_KINDS:
            raise ConfigError(f"extractor_kind must be one of {EXTRACTOR_KINDS}")
        if self.tap_layer not in VGG_TAPS:
            raise ConfigError(f"tap_layer must be one of {sorted(VGG_TAPS)}")


@dataclass(frozen=True)
class LossConfig:
    lambda_p: float = 1.0
    loss_kind: str = "ssim+perceptual"
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    ssim: SsimParams = field(default_factory=SsimParams)

    def __post_init__(self):
        if self.lambda_p < 0:
            raise ConfigError(f"lambda_p must be >= 0, got {self.lambda_p}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")

    @property
    def uses_perceptual(self) -> bool:
        return self.loss_kind.endswith("+perceptual")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        d["perceptual"] = PerceptualConfig(**d.get("perceptual", {}))
        d["ssim"] = SsimParams(**d.get("ssim", {}))
        return cls(**d)


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    """Normalized 2-D Gaussian window of shape (size, size)."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def ssim_map(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    """Per-location, per-channel SSIM over valid window positions."""
    _check_pair(x, y)
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected N x C x H x W tensors, got {tuple(x.shape)}")
    w = p.window_size
    if x.shape[-2] < w or x.shape[-1] < w:
        raise ShapeError(f"image size {tuple(x.shape[-2:])} is smaller than the {w}x{w} window")
    c = x.shape[1]
    win = gaussian_window(w, p.window_sigma, x.dtype).to(x.device).expand(c, 1, w, w)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(y * y) - mu_yy
    cov = filt(x * y) - mu_xy
    c1, c2 = p.c1, p.c2
    return ((2 * mu_xy + c1) * (2 * cov + c2)) / ((mu_xx + mu_yy + c1) * (var_x + var_y + c2))


def ssim(x: torch.Tensor, y: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    return ssim_map(x, y, p).mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor, p: SsimParams = SsimParams()) -> torch.Tensor:
    return -ssim(pred, target, p)


# Layer names of VGG-16's first two stages, indexed as in torchvision's `features`.
_VGG_LAYOUT = [
    ("conv1_1", 3, 64), ("relu1_1",), ("conv1_2", 64, 64), ("relu1_2",), ("pool1",),
    ("conv2_1", 64, 128), ("relu2_1",), ("conv2_2", 128, 128), ("relu2_2",),
]
VGG_TAPS = {spec[0]: i for i, spec in enumerate(_VGG_LAYOUT) if spec[0].startswith("relu")}


class VGGFeatures(nn.Module):
    """VGG-16 trunk up to a ReLU tap, frozen.

    Submodule indices match torchvision's ``vgg16().features`` so a standard
    VGG-16 state dict loads directly.
    """

    def __init__(self, cfg: PerceptualConfig = PerceptualConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        for spec in _VGG_LAYOUT[: VGG_TAPS[cfg.tap_layer] + 1]:
            name = spec[0]
            if name.startswith("conv"):
                layers.append(nn.Conv2d(spec[1], spec[2], 3, padding=1))
            elif name.startswith("relu"):
                layers.append(nn.ReLU())
            else:
                layers.append(nn.MaxPool2d(2, 2))
        self.features = nn.Sequential(*layers)
        self.normalize = cfg.extractor_kind == "pretrained"
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if cfg.extractor_kind == "pretrained":
            self._load(cfg.weights_path)
        else:
            gen = torch.Generator().manual_seed(cfg.seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                        m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def _load(self, path: str | None) -> None:
        if not path:
            raise WeightsError("pretrained extractor requested but no weights_path given")
        path = Path(path)
        if not path.is_file():
            raise WeightsError(f"extractor weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state and isinstance(state["state_dict"], dict):
            state = state["state_dict"]
        ours = {}
        for key, value in state.items():
            if key.startswith("features."):
                key = key[len("features."):]
            idx = key.split(".", 1)[0]
            if idx.isdigit() and int(idx) < len(self.features):
                ours[key] = value
        missing = set(self.features.state_dict()) - set(ours)
        if missing:
            raise WeightsError(f"{path} lacks parameters {sorted(missing)}")
        self.features.load_state_dict(ours)

    def train(self, mode: bool = True):
        # frozen: stays in eval mode whatever the parent does
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.features(x)


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Mean squared distance between tapped features, averaged over C x H x W (and batch)."""
    _check_pair(pred, target)
    return F.mse_loss(extractor(pred), extractor(target))


class HybridLoss(nn.Module):
    """Dispatches the four loss arms; returns (total, components)."""

    def __init__(self, cfg: LossConfig = LossConfig(), extractor: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        if cfg.uses_perceptual:
            self.extractor = extractor if extractor is not None else VGGFeatures(cfg.perceptual)
        else:
            self.extractor = None

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, dict]:
        cfg = self.cfg
        if cfg.loss_kind.startswith("ssim"):
            base = ssim_loss(pred, target, cfg.ssim)
            parts = {"ssim": base}
        else:
            _check_pair(pred, target)
            base = F.mse_loss(pred, target)
            parts = {"mse": base}
        if self.extractor is None:
            return base, parts
        if self.extractor.mean.dtype != pred.dtype:
            self.extractor.to(pred.dtype)
        lp = perceptual_loss(pred, target, self.extractor)
        parts["perceptual"] = lp
        return base + cfg.lambda_p * lp, parts


def hybrid_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig(),
                extractor: nn.Module | None = None) -> torch.Tensor:
    return HybridLoss(cfg, extractor)(pred, target)[0]


def mse(pred: torch.Tensor, target: torch.Tensor) -> float:
    _check_pair(pred, target)
    return float(((pred.double() - target.double()) ** 2).mean())


def psnr(pred: torch.Tensor, target: torch.Tensor, max_value: float = 1.0) -> float:
    """PSNR in dB; identical inputs report ``PSNR_CAP_DB``."""
    err = mse(pred, target)
    if err == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value**2 / err))
