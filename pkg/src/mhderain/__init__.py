"""Single-image deraining with a multi-stream dual-path residual-dense network."""

from .blocks import (
    DPRDB,
    Cascade,
    CascadeConfig,
    ConfigError,
    DprdbConfig,
    DprdbState,
    ShapeError,
    ShortcutMerge,
    Transition,
    dprdb_forward,
)
from .data import RainPair, StreakParams, compose_rainy, extract_patches, generate_streaks, load_pair_dataset
from .losses import LossConfig, PerceptualConfig, SsimParams, hybrid_loss, perceptual_loss, psnr, ssim, ssim_loss
from .network import DerainOutput, MHDerainNet, NetworkConfig
from .training import MetricsReport, TrainConfig, evaluate, lr_schedule, train

__version__ = "0.1.0"
