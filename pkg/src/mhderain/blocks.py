"""Dual-path residual-dense blocks and the cascades built from them.

A feature map entering a block is split into a fixed-width residual part and a
growing dense part. The block computes new features from the whole map, adds
the first ``r`` channels onto the residual part and appends the remaining
``k_D`` channels to the dense part, so every block widens the map by ``k_D``.
A cascade chains several blocks and closes with a 1x1 transition layer that
brings the width back to the cascade's entry width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn


class ConfigError(ValueError):
    """Raised when tensors or settings disagree with a block configuration."""


class ShapeError(ValueError):
    """Raised when spatial sizes are incompatible with an operation."""


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class DprdbConfig:
    residual_width: int = 32
    dense_growth: int = 16
    bottleneck_width: int = 32
    spatial_kernel: int = 3

    def __post_init__(self):
        for name in ("residual_width", "dense_growth", "bottleneck_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd and >= 1, got {self.spatial_kernel}")

    @property
    def out_width(self) -> int:
        """Channels produced by the bottleneck's last 1x1 conv."""
        return self.residual_width + self.dense_growth

    @property
    def entry_width(self) -> int:
        # stems and transitions emit r + k_D so the first split has a non-empty dense part
        return self.residual_width + self.dense_growth


@dataclass(frozen=True)
class CascadeConfig:
    blocks_per_cascade: int = 6
    cascades_per_stream: int = 6
    transition_width: int = 48
    shortcut_pairs: tuple[tuple[int, int], ...] = ((2, 4), (1, 5))

    def __post_init__(self):
        if self.blocks_per_cascade < 1 or self.cascades_per_stream < 1:
            raise ConfigError("blocks_per_cascade and cascades_per_stream must be >= 1")
        if self.transition_width < 1:
            raise ConfigError("transition_width must be >= 1")
        dests = set()
        for src, dst in self.shortcut_pairs:
            if not 1 <= src < dst <= self.cascades_per_stream:
                raise ConfigError(
                    f"shortcut ({src}, {dst}) must satisfy 1 <= src < dst <= "
                    f"{self.cascades_per_stream}"
                )
            if dst in dests:
                raise ConfigError(f"cascade {dst} is the destination of two shortcuts")
            dests.add(dst)


class DprdbState(NamedTuple):
    """Residual part (exactly ``r`` channels) and dense part of a feature map."""

    residual: torch.Tensor
    dense: torch.Tensor

    @classmethod
    def split(cls, features: torch.Tensor, residual_width: int) -> "DprdbState":
        if features.shape[1] < residual_width:
            raise ConfigError(
                f"feature map has {features.shape[1]} channels, fewer than residual width {residual_width}"
            )
        return cls(features[:, :residual_width], features[:, residual_width:])

    def merge(self) -> torch.Tensor:
        return torch.cat([self.residual, self.dense], dim=1)

    @property
    def channels(self) -> int:
        return self.residual.shape[1] + self.dense.shape[1]


def bn_relu_conv(in_ch: int, out_ch: int, kernel: int, bias: bool = True) -> nn.Sequential:
    return nn.Sequential(
        nn.BatchNorm2d(in_ch, eps=BN_EPS, momentum=BN_MOMENTUM),
        nn.ReLU(),
        nn.Conv2d(in_ch, out_ch, kernel, padding=(kernel - 1) // 2, bias=bias),
    )


def _check_spatial(x: torch.Tensor, kernel: int) -> None:
    if x.shape[-2] < kernel or x.shape[-1] < kernel:
        raise ShapeError(f"spatial size {tuple(x.shape[-2:])} is smaller than kernel {kernel}")


class DPRDB(nn.Module):
    """One dual-path residual-dense block.

    ``in_channels`` is the total width ``r + d`` of the incoming map. The
    bottleneck is BN-ReLU-Conv 1x1, then ``s x s``, then 1x1 back out to
    ``r + k_D`` channels.
    """

    def __init__(self, in_channels: int, cfg: DprdbConfig):
        super().__init__()
        if in_channels < cfg.residual_width:
            raise ConfigError(
                f"in_channels={in_channels} is smaller than residual_width={cfg.residual_width}"
            )
        self.cfg = cfg
        self.in_channels = in_channels
        s = cfg.spatial_kernel
        self.body = nn.Sequential(
            bn_relu_conv(in_channels, cfg.bottleneck_width, 1),
            bn_relu_conv(cfg.bottleneck_width, cfg.bottleneck_width, s),
            bn_relu_conv(cfg.bottleneck_width, cfg.out_width, 1),
        )

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.cfg.dense_growth

    def forward_state(self, state: DprdbState) -> DprdbState:
        r = self.cfg.residual_width
        if state.residual.shape[1] != r or state.channels != self.in_channels:
            raise ConfigError(
                f"block expects {self.in_channels} channels with residual width {r}, "
                f"got {state.residual.shape[1]} + {state.dense.shape[1]}"
            )
        features = state.merge()
        _check_spatial(features, self.cfg.spatial_kernel)
        f = self.body(features)
        f_res, f_dense = f[:, :r], f[:, r:]
        return DprdbState(state.residual + f_res, torch.cat([state.dense, f_dense], dim=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"block expects {self.in_channels} channels, got {x.shape[1]}")
        return self.forward_state(DprdbState.split(x, self.cfg.residual_width)).merge()


def dprdb_forward(state: DprdbState, block: DPRDB) -> DprdbState:
    return block.forward_state(state)


class Transition(nn.Module):
    """BN-ReLU-Conv 1x1 that narrows a cascade's grown map back to ``out_channels``."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.layer = bn_relu_conv(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"transition expects {self.in_channels} channels, got {x.shape[1]}")
        return self.layer(x)


class Cascade(nn.Module):
    """``blocks_per_cascade`` DPRDBs followed by a transition layer."""

    def __init__(self, n_blocks: int, transition_width: int, cfg: DprdbConfig):
        super().__init__()
        if n_blocks < 1:
            raise ConfigError("a cascade needs at least one block")
        self.cfg = cfg
        self.entry_width = transition_width
        width = transition_width
        blocks = []
        for _ in range(n_blocks):
            blocks.append(DPRDB(width, cfg))
            width += cfg.dense_growth
        self.blocks = nn.ModuleList(blocks)
        self.transition = Transition(width, transition_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.entry_width:
            raise ConfigError(f"cascade expects {self.entry_width} channels, got {x.shape[1]}")
        state = DprdbState.split(x, self.cfg.residual_width)
        for block in self.blocks:
            state = block.forward_state(state)
        return self.transition(state.merge())


class ShortcutMerge(nn.Module):
    """Fuses a long-shortcut source with the preceding cascade's output.

    Channels are concatenated as ``[shortcut, current]`` (earlier cascade
    first) and reduced back to ``width`` with BN-ReLU-Conv 1x1.
    """

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.layer = bn_relu_conv(2 * width, width, 1)

    def forward(self, current: torch.Tensor, shortcut: torch.Tensor) -> torch.Tensor:
        if current.shape[0] != shortcut.shape[0] or current.shape[-2:] != shortcut.shape[-2:]:
            raise ShapeError(
                f"cannot merge tensors of shape {tuple(current.shape)} and {tuple(shortcut.shape)}"
            )
        if current.shape[1] != self.width or shortcut.shape[1] != self.width:
            raise ConfigError(f"merge expects {self.width} channels on both inputs")
        return self.layer(torch.cat([shortcut, current], dim=1))


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in scaled normal init for convs, unit/zero BN affine params."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
