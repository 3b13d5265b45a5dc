"""Multi-stream deraining network.

Each stream lifts the image to DPRDB width with a stem conv, runs a chain of
cascades with long shortcuts between them, and emits a feature map. The
streams (optionally together with the raw input) are fused by a 3x3 conv and
tanh into a negative residual, which is added back to the input and refined
by a small ReLU-Conv-ReLU-Conv head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

from .blocks import (
    Cascade,
    CascadeConfig,
    ConfigError,
    DprdbConfig,
    ShapeError,
    ShortcutMerge,
    init_weights,
)


@dataclass(frozen=True)
class NetworkConfig:
    stream_kernels: tuple[int, ...] = (3, 5, 7)
    cascades_per_stream: int = 6
    blocks_per_cascade: int = 6
    dprdb: DprdbConfig = field(default_factory=DprdbConfig)
    shortcut_pairs: tuple[tuple[int, int], ...] = ((2, 4), (1, 5))
    input_channels: int = 3
    inject_input_shortcut: bool = True
    fine_tune_width: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stream_kernels", tuple(int(k) for k in self.stream_kernels))
        object.__setattr__(
            self, "shortcut_pairs", tuple((int(a), int(b)) for a, b in self.shortcut_pairs)
        )
        if not self.stream_kernels:
            raise ConfigError("at least one stream is required")
        for k in self.stream_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"stream kernels must be odd and >= 1, got {k}")
        if self.input_channels < 1 or self.fine_tune_width < self.input_channels:
            raise ConfigError("need input_channels >= 1 and fine_tune_width >= input_channels")
        # validates shortcut pairs against the cascade count
        self.cascade_config()

    def cascade_config(self) -> CascadeConfig:
        return CascadeConfig(
            blocks_per_cascade=self.blocks_per_cascade,
            cascades_per_stream=self.cascades_per_stream,
            transition_width=self.dprdb.entry_width,
            shortcut_pairs=self.shortcut_pairs,
        )

    def stream_dprdb(self, stream_index: int) -> DprdbConfig:
        if not 0 <= stream_index < len(self.stream_kernels):
            raise ConfigError(
                f"stream_index {stream_index} out of range for {len(self.stream_kernels)} streams"
            )
        return replace(self.dprdb, spatial_kernel=self.stream_kernels[stream_index])

    @property
    def max_kernel(self) -> int:
        return max(max(self.stream_kernels), 7)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stream_kernels"] = list(self.stream_kernels)
        d["shortcut_pairs"] = [list(p) for p in self.shortcut_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["dprdb"] = DprdbConfig(**d.get("dprdb", {}))
        d["stream_kernels"] = tuple(d.get("stream_kernels", (3, 5, 7)))
        d["shortcut_pairs"] = tuple(tuple(p) for p in d.get("shortcut_pairs", ()))
        return cls(**d)


class DerainOutput(NamedTuple):
    negative_residual: torch.Tensor
    coarse: torch.Tensor
    derained: torch.Tensor


class Stream(nn.Module):
    def __init__(self, cfg: NetworkConfig, stream_index: int):
        super().__init__()
        dcfg = cfg.stream_dprdb(stream_index)
        ccfg = cfg.cascade_config()
        k = dcfg.spatial_kernel
        self.kernel = k
        self.width = ccfg.transition_width
        self.stem = nn.Conv2d(cfg.input_channels, self.width, k, padding=(k - 1) // 2)
        self.cascades = nn.ModuleList(
            Cascade(ccfg.blocks_per_cascade, ccfg.transition_width, dcfg)
            for _ in range(ccfg.cascades_per_stream)
        )
        # destination cascade (1-based) -> source cascade
        self.sources = {dst: src for src, dst in ccfg.shortcut_pairs}
        self.merges = nn.ModuleDict({str(dst): ShortcutMerge(self.width) for dst in self.sources})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs = [self.stem(x)]  # outputs[c] is T^c, T^0 being the stem
        for c, cascade in enumerate(self.cascades, start=1):
            entry = outputs[-1]
            if c in self.sources:
                entry = self.merges[str(c)](entry, outputs[self.sources[c]])
            outputs.append(cascade(entry))
        return outputs[-1]


class FineTune(nn.Module):
    """ReLU -> Conv 7x7 -> ReLU -> Conv 3x3."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, width, 7, padding=3)
        self.conv2 = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, coarse: torch.Tensor) -> torch.Tensor:
        return self.conv2(torch.relu(self.conv1(torch.relu(coarse))))


class MHDerainNet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        self.streams = nn.ModuleList(Stream(cfg, i) for i in range(len(cfg.stream_kernels)))
        width = cfg.dprdb.entry_width
        fused = width * len(cfg.stream_kernels)
        if cfg.inject_input_shortcut:
            fused += cfg.input_channels
        self.fuse = nn.Conv2d(fused, cfg.input_channels, 3, padding=1)
        self.fine = FineTune(cfg.input_channels, cfg.fine_tune_width)
        init_weights(self, torch.Generator().manual_seed(cfg.seed))
        self._init_output_path()

    def _init_output_path(self, noise_scale: float = 0.1) -> None:
        # Start close to "derained = rainy": small negative residual, and a head
        # that passes its first `input_channels` channels through its kernel centers.
        with torch.no_grad():
            self.fuse.weight.mul_(noise_scale)
            for conv in (self.fine.conv1, self.fine.conv2):
                conv.weight.mul_(noise_scale)
                k = conv.kernel_size[0] // 2
                for c in range(self.cfg.input_channels):
                    conv.weight[c, c, k, k] += 1.0

    def fuse_streams(self, streams: Sequence[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
        shape = streams[0].shape
        for s in streams[1:]:
            if s.shape != shape:
                raise ShapeError(f"stream outputs differ in shape: {tuple(shape)} vs {tuple(s.shape)}")
        parts = list(streams)
        if self.cfg.inject_input_shortcut:
            parts.append(x)
        return torch.tanh(self.fuse(torch.cat(parts, dim=1)))

    def fine_tune(self, coarse: torch.Tensor) -> torch.Tensor:
        out = self.fine(coarse)
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out

    def forward(self, x: torch.Tensor) -> DerainOutput:
        if x.dim() != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(
                f"expected N x {self.cfg.input_channels} x H x W input, got {tuple(x.shape)}"
            )
        k = self.cfg.max_kernel
        if x.shape[-2] < k or x.shape[-1] < k:
            raise ShapeError(f"input spatial size {tuple(x.shape[-2:])} is smaller than {k}")
        nr = self.fuse_streams([s(x) for s in self.streams], x)
        coarse = x + nr
        return DerainOutput(nr, coarse, self.fine_tune(coarse))

    def derain(self, x: torch.Tensor) -> DerainOutput:
        return self(x)


def stream_forward(model: MHDerainNet, x: torch.Tensor, stream_index: int) -> torch.Tensor:
    if not 0 <= stream_index < len(model.streams):
        raise ConfigError(f"stream_index {stream_index} out of range for {len(model.streams)} streams")
    return model.streams[stream_index](x)
