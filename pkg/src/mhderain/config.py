"""Run configuration as flat ``key = value`` text with dotted section prefixes.

Example::

    # network
    net.stream_kernels = 3,5,7
    net.shortcut_pairs = 2-4,1-5
    train.epochs = 100
    loss.loss_kind = ssim+perceptual
    data.train_dir = data/rain100h/train

``seed`` seeds the network, the training loop and the synthetic data unless
their own ``*.seed`` keys are given.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .blocks import ConfigError
from .data import DEFAULT_CLEAN_PATTERN, DEFAULT_RAINY_PATTERN, HEAVY_RAIN, LIGHT_RAIN, StreakParams
from .network import NetworkConfig
from .training import TrainConfig

SYNTH_PRESETS = {"light": LIGHT_RAIN, "heavy": HEAVY_RAIN}
RESOLVED_CONFIG_NAME = "config.cfg"


@dataclass(frozen=True)
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    test_dir: str | None = None
    rainy_pattern: str = DEFAULT_RAINY_PATTERN
    clean_pattern: str = DEFAULT_CLEAN_PATTERN
    synth_count: int = 8
    synth_size: int = 64
    synth_preset: str = "light"
    synth_seed: int = 0

    def __post_init__(self):
        if self.synth_preset not in SYNTH_PRESETS:
            raise ConfigError(f"synth_preset must be one of {sorted(SYNTH_PRESETS)}")
        if self.synth_count < 1 or self.synth_size < 1:
            raise ConfigError("synth_count and synth_size must be positive")

    def streaks(self) -> StreakParams:
        return SYNTH_PRESETS[self.synth_preset]


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "train": self.train.to_dict(),
                "data": asdict(self.data), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            return cls(NetworkConfig.from_dict(d["network"]), TrainConfig.from_dict(d["train"]),
                       DataConfig(**d["data"]), int(d["seed"]))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        flat = self.to_dict()
        lines = []
        section = None
        for key, (path, kind) in KEYS.items():
            if key in SEEDED_KEYS and _get(flat, path) == self.seed:
                continue  # follows `seed`
            head = key.split(".", 1)[0] if "." in key else ""
            if head != section:
                if lines:
                    lines.append("")
                section = head
            lines.append(f"{key} = {_FORMATTERS[kind](_get(flat, path))}")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / RESOLVED_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


# ---------------------------------------------------------------------------
# value parsing


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _optional(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(s: str):
        return None if s.strip().lower() in ("", "none") else parse(s)
    return inner


def _parse_ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v.strip()]


def _parse_floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _parse_pairs(s: str) -> list[list[int]]:
    if s.strip().lower() in ("", "none"):
        return []
    pairs = []
    for item in s.split(","):
        a, b = item.split("-")
        pairs.append([int(a), int(b)])
    return pairs


_PARSERS: dict[str, Callable[[str], object]] = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str.strip,
    "ints": _parse_ints,
    "floats": _parse_floats,
    "pairs": _parse_pairs,
    "opt_int": _optional(int),
    "opt_float": _optional(float),
    "opt_str": _optional(str.strip),
}

_FORMATTERS: dict[str, Callable[[object], str]] = {
    "int": str,
    "float": repr,
    "bool": lambda v: "true" if v else "false",
    "str": str,
    "ints": lambda v: ",".join(str(x) for x in v),
    "floats": lambda v: ",".join(repr(float(x)) for x in v),
    "pairs": lambda v: ",".join(f"{a}-{b}" for a, b in v) or "none",
    "opt_int": lambda v: "none" if v is None else str(v),
    "opt_float": lambda v: "none" if v is None else repr(v),
    "opt_str": lambda v: "none" if v is None else str(v),
}

# key -> (path into RunConfig.to_dict(), value kind)
KEYS: dict[str, tuple[tuple[str, ...], str]] = {
    "seed": (("seed",), "int"),
    "net.stream_kernels": (("network", "stream_kernels"), "ints"),
    "net.cascades_per_stream": (("network", "cascades_per_stream"), "int"),
    "net.blocks_per_cascade": (("network", "blocks_per_cascade"), "int"),
    "net.residual_width": (("network", "dprdb", "residual_width"), "int"),
    "net.dense_growth": (("network", "dprdb", "dense_growth"), "int"),
    "net.bottleneck_width": (("network", "dprdb", "bottleneck_width"), "int"),
    "net.shortcut_pairs": (("network", "shortcut_pairs"), "pairs"),
    "net.input_channels": (("network", "input_channels"), "int"),
    "net.inject_input_shortcut": (("network", "inject_input_shortcut"), "bool"),
    "net.fine_tune_width": (("network", "fine_tune_width"), "int"),
    "net.seed": (("network", "seed"), "int"),
    "train.initial_lr": (("train", "initial_lr"), "float"),
    "train.decay_factor": (("train", "decay_factor"), "float"),
    "train.decay_every_epochs": (("train", "decay_every_epochs"), "int"),
    "train.batch_size": (("train", "batch_size"), "int"),
    "train.epochs": (("train", "epochs"), "int"),
    "train.patches_per_image": (("train", "patches_per_image"), "int"),
    "train.patch_size": (("train", "patch_size"), "int"),
    "train.seed": (("train", "seed"), "int"),
    "train.eval_every_epochs": (("train", "eval_every_epochs"), "int"),
    "train.val_fraction": (("train", "val_fraction"), "float"),
    "train.max_steps": (("train", "max_steps"), "opt_int"),
    "train.adam_betas": (("train", "adam_betas"), "floats"),
    "train.adam_eps": (("train", "adam_eps"), "float"),
    "train.weight_decay": (("train", "weight_decay"), "float"),
    "train.grad_clip": (("train", "grad_clip"), "opt_float"),
    "loss.loss_kind": (("train", "loss", "loss_kind"), "str"),
    "loss.lambda_p": (("train", "loss", "lambda_p"), "float"),
    "loss.extractor_kind": (("train", "loss", "perceptual", "extractor_kind"), "str"),
    "loss.tap_layer": (("train", "loss", "perceptual", "tap_layer"), "str"),
    "loss.weights_path": (("train", "loss", "perceptual", "weights_path"), "opt_str"),
    "loss.extractor_seed": (("train", "loss", "perceptual", "seed"), "int"),
    "loss.ssim_window_size": (("train", "loss", "ssim", "window_size"), "int"),
    "loss.ssim_window_sigma": (("train", "loss", "ssim", "window_sigma"), "float"),
    "loss.ssim_data_range": (("train", "loss", "ssim", "data_range"), "float"),
    "loss.ssim_k1": (("train", "loss", "ssim", "k1"), "float"),
    "loss.ssim_k2": (("train", "loss", "ssim", "k2"), "float"),
    "data.train_dir": (("data", "train_dir"), "opt_str"),
    "data.val_dir": (("data", "val_dir"), "opt_str"),
    "data.test_dir": (("data", "test_dir"), "opt_str"),
    "data.rainy_pattern": (("data", "rainy_pattern"), "str"),
    "data.clean_pattern": (("data", "clean_pattern"), "str"),
    "data.synth_count": (("data", "synth_count"), "int"),
    "data.synth_size": (("data", "synth_size"), "int"),
    "data.synth_preset": (("data", "synth_preset"), "str"),
    "data.synth_seed": (("data", "synth_seed"), "int"),
}

# keys that follow the top-level seed unless set explicitly
SEEDED_KEYS = ("net.seed", "train.seed", "data.synth_seed")


def _get(d: dict, path: tuple[str, ...]):
    for p in path:
        d = d[p]
    return d


def _set(d: dict, path: tuple[str, ...], value) -> None:
    for p in path[:-1]:
        d = d[p]
    d[path[-1]] = value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment. Later keys win."""
    entries = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        entries[key] = value
    return entries


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def build_run_config(entries: Mapping[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string entries on top of ``base`` (defaults when omitted)."""
    flat = copy.deepcopy((base or RunConfig()).to_dict())
    entries = dict(entries)
    if "seed" in entries:
        for key in SEEDED_KEYS:
            entries.setdefault(key, entries["seed"])
    for key, raw in entries.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        path, kind = KEYS[key]
        try:
            value = _PARSERS[kind](raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
        _set(flat, path, value)
    return RunConfig.from_dict(flat)


def load_run_config(path: str | Path) -> RunConfig:
    return build_run_config(read_config_file(path))
