"""Rain composition, synthetic rain streaks, paired dataset IO and patch sampling.

Images live as float32 numpy arrays laid out C x H x W with values in [0, 1].
"""

from __future__ import annotations

import json
import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_RAINY_PATTERN = "rain-{id}.png"
DEFAULT_CLEAN_PATTERN = "norain-{id}.png"


class DatasetError(RuntimeError):
    pass


@dataclass
class RainPair:
    rainy: np.ndarray
    clean: np.ndarray
    identifier: str

    def __post_init__(self):
        if self.rainy.shape != self.clean.shape:
            raise DatasetError(
                f"pair {self.identifier}: rainy {self.rainy.shape} vs clean {self.clean.shape}"
            )


class PairDataset(list):
    """List of RainPairs plus the files that could not be paired."""

    def __init__(self, pairs=(), orphans=(), root=None, eval_only=False):
        super().__init__(pairs)
        self.orphans = list(orphans)
        self.root = root
        self.eval_only = eval_only


# ---------------------------------------------------------------------------
# composition and synthesis


def compose_rainy(background: np.ndarray, rain: np.ndarray) -> np.ndarray:
    """Additive rain model, clipped to [0, 1]. ``rain`` may be H x W for a gray layer."""
    background = np.asarray(background)
    rain = np.asarray(rain)
    if rain.shape != background.shape:
        if rain.ndim == 2 and background.ndim == 3 and rain.shape == background.shape[1:]:
            rain = rain[None]
        else:
            raise DatasetError(f"shape mismatch: background {background.shape} vs rain {rain.shape}")
    return np.clip(background + rain, 0.0, 1.0).astype(background.dtype, copy=False)


@dataclass(frozen=True)
class StreakParams:
    """Ranges are inclusive ``(low, high)`` pairs; angles in degrees, 90 = vertical.

    ``count`` is the number of streaks on an image of ``reference_area``
    pixels and is scaled with the actual area; ``reference_area=None`` makes
    it an absolute count.
    """

    count: tuple[int, int] = (40, 80)
    orientation_bands: tuple[tuple[float, float], ...] = ((75.0, 85.0),)
    length: tuple[float, float] = (8.0, 24.0)
    width: tuple[float, float] = (1.0, 1.5)
    intensity: tuple[float, float] = (0.25, 0.6)
    blur: float = 3.0
    reference_area: int | None = 256 * 256
    seed: int = 0

    def __post_init__(self):
        ranges = {"count": self.count, "length": self.length, "width": self.width,
                  "intensity": self.intensity}
        for i, band in enumerate(self.orientation_bands):
            ranges[f"orientation_bands[{i}]"] = band
        for name, (lo, hi) in ranges.items():
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if not self.orientation_bands:
            raise ValueError("at least one orientation band is required")
        if self.count[0] < 0 or self.length[0] <= 0 or self.width[0] <= 0:
            raise ValueError("count must be >= 0, length and width > 0")
        if not (0.0 <= self.intensity[0] and self.intensity[1] <= 1.0):
            raise ValueError("intensity must lie in [0, 1]")
        if self.blur < 0:
            raise ValueError("blur must be >= 0")
        if self.reference_area is not None and self.reference_area < 1:
            raise ValueError("reference_area must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StreakParams":
        d = dict(d)
        d["orientation_bands"] = tuple(tuple(b) for b in d["orientation_bands"])
        for key in ("count", "length", "width", "intensity"):
            d[key] = tuple(d[key])
        return cls(**d)


LIGHT_RAIN = StreakParams()
# several distinct streak directions and a denser, brighter layer
HEAVY_RAIN = StreakParams(
    count=(200, 320),
    orientation_bands=((60.0, 66.0), (72.0, 78.0), (84.0, 90.0), (96.0, 102.0), (108.0, 114.0)),
    length=(12.0, 40.0),
    width=(1.5, 3.0),
    intensity=(0.45, 0.85),
    blur=4.0,
)


def _streak(layer: np.ndarray, x0: float, y0: float, angle: float, length: float,
            width: float, intensity: float, blur: float) -> None:
    """Accumulate one soft-edged segment into ``layer`` in place.

    ``(x0, y0)`` is the segment's start at a pixel center. Across the
    streak the profile falls off linearly over one pixel past ``width / 2``;
    along it the segment is convolved with a box of length ``blur``, which is
    a motion blur in the streak's own direction.
    """
    h, w = layer.shape
    dx, dy = math.cos(math.radians(angle)), math.sin(math.radians(angle))
    x1, y1 = x0 + dx * length, y0 + dy * length
    pad = width / 2 + 1 + blur / 2
    xa = max(int(math.floor(min(x0, x1) - pad)), 0)
    xb = min(int(math.ceil(max(x0, x1) + pad)) + 1, w)
    ya = max(int(math.floor(min(y0, y1) - pad)), 0)
    yb = min(int(math.ceil(max(y0, y1) + pad)) + 1, h)
    if xa >= xb or ya >= yb:
        return
    ys, xs = np.mgrid[ya:yb, xa:xb]
    rx, ry = xs - x0, ys - y0
    along = rx * dx + ry * dy
    across = np.abs(-rx * dy + ry * dx)
    # clean up float noise so axis-aligned streaks stay exactly on their pixels
    across = np.round(across, 9)
    profile = np.clip(width / 2 + 0.5 - across, 0.0, 1.0)
    if blur > 0:
        lo = np.maximum(along - blur / 2, 0.0)
        hi = np.minimum(along + blur / 2, length)
        taper = np.clip(hi - lo, 0.0, None) / min(blur, length)
        taper = np.minimum(taper, 1.0)
    else:
        taper = ((along >= 0) & (along <= length)).astype(float)
    layer[ya:yb, xa:xb] += intensity * profile * taper


def generate_streaks(shape: tuple[int, int], p: StreakParams = LIGHT_RAIN,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Gray rain layer of shape ``(H, W)`` with values in [0, 1].

    With ``rng=None`` the layer is a pure function of ``p.seed``.
    """
    h, w = shape
    if rng is None:
        rng = np.random.default_rng(p.seed)
    max_len = float(min(h, w) - 1)
    len_lo, len_hi = p.length
    if len_hi > max_len:
        warnings.warn(
            f"streak length {len_hi} exceeds image size {shape}; clipping to {max_len}",
            stacklevel=2,
        )
        len_lo, len_hi = min(len_lo, max_len), max_len
    layer = np.zeros((h, w), dtype=np.float64)
    n = int(rng.integers(p.count[0], p.count[1] + 1))
    if p.reference_area is not None:
        n = int(round(n * h * w / p.reference_area))
    bands = p.orientation_bands
    for _ in range(n):
        lo, hi = bands[int(rng.integers(len(bands)))]
        angle = rng.uniform(lo, hi)
        length = rng.uniform(len_lo, len_hi)
        width = rng.uniform(*p.width)
        intensity = rng.uniform(*p.intensity)
        # start anywhere (integer pixel center) such that streaks can enter from outside
        x0 = float(rng.integers(-int(length), w))
        y0 = float(rng.integers(-int(length), h))
        _streak(layer, x0, y0, angle, length, width, intensity, p.blur)
    return np.clip(layer, 0.0, 1.0).astype(np.float32)


def synth_background(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth colored background with a few shapes and mild texture, 3 x H x W."""
    h, w = shape
    gy, gx = np.mgrid[0:h, 0:w]
    yy, xx = gy / max(h, w), gx / max(h, w)
    c0, c1, c2 = rng.uniform(0.1, 0.8, size=(3, 3))
    img = c0[:, None, None] + c1[:, None, None] * xx * 0.6 + (c2[:, None, None] - 0.45) * yy * 0.6
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.08, 0.35) * h, rng.uniform(0.08, 0.35) * w
        mask = ((gy - cy) / ry) ** 2 + ((gx - cx) / rx) ** 2 <= 1
        if rng.random() < 0.5:
            y0, x0 = int(cy - ry / 2), int(cx - rx / 2)
            mask = np.zeros((h, w), bool)
            mask[max(y0, 0):max(y0 + int(ry), 0), max(x0, 0):max(x0 + int(rx), 0)] = True
        img[:, mask] = rng.uniform(0.05, 0.85, size=3)[:, None]
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), sigma=2.0)
    texture /= max(np.abs(texture).max(), 1e-8)
    img = img + 0.04 * texture[None]
    img = ndimage.gaussian_filter(img, sigma=(0, 0.8, 0.8))
    return np.clip(img, 0.0, 0.9).astype(np.float32)


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Per-item generator so outputs do not depend on processing order."""
    return np.random.default_rng([seed, index])


def synth_pair(index: int, size: int | tuple[int, int], p: StreakParams, seed: int) -> RainPair:
    shape = (size, size) if isinstance(size, int) else tuple(size)
    rng = item_rng(seed, index)
    clean = synth_background(shape, rng)
    rain = generate_streaks(shape, p, rng)
    return RainPair(compose_rainy(clean, rain), clean, str(index + 1))


def synth_dataset(count: int, size: int | tuple[int, int], p: StreakParams = LIGHT_RAIN,
                  seed: int = 0) -> PairDataset:
    return PairDataset(synth_pair(i, size, p, seed) for i in range(count))


# ---------------------------------------------------------------------------
# image IO


def decode_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    """C x H x W float in [0, 1] -> H x W x C uint8."""
    img = np.asarray(img, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def encode_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def write_pair_dataset(pairs: Sequence[RainPair], root: str | Path, manifest: dict | None = None,
                       rainy_pattern: str = DEFAULT_RAINY_PATTERN,
                       clean_pattern: str = DEFAULT_CLEAN_PATTERN) -> Path:
    root = Path(root)
    (root / "rainy").mkdir(parents=True, exist_ok=True)
    (root / "norain").mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        encode_image(pair.rainy, root / "rainy" / rainy_pattern.format(id=pair.identifier))
        encode_image(pair.clean, root / "norain" / clean_pattern.format(id=pair.identifier))
    if manifest is not None:
        (root / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def pattern_regex(pattern: str) -> re.Pattern:
    if "{id}" not in pattern:
        raise DatasetError(f"pattern {pattern!r} must contain '{{id}}'")
    stem, suffix = pattern, ""
    for ext in IMAGE_SUFFIXES:
        if pattern.lower().endswith(ext):
            stem, suffix = pattern[: -len(ext)], r"\.(?:png|jpe?g)"
            break
    head, tail = stem.split("{id}", 1)
    return re.compile(re.escape(head) + r"(\d+)" + re.escape(tail) + suffix, re.IGNORECASE)


def _scan(directory: Path, regex: re.Pattern) -> dict[str, Path]:
    found = {}
    for f in sorted(directory.iterdir()):
        m = regex.fullmatch(f.name)
        if m and f.is_file():
            found[m.group(1)] = f
    return found


def load_pair_dataset(root: str | Path, rainy_pattern: str = DEFAULT_RAINY_PATTERN,
                      clean_pattern: str = DEFAULT_CLEAN_PATTERN,
                      eval_only: bool = False) -> PairDataset:
    """Pair rainy and clean files by their numeric id.

    Accepts ``<root>/rainy`` + ``<root>/norain`` subdirectories or a flat
    directory. Files without a partner are logged and listed in ``orphans``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    if (root / "rainy").is_dir() and (root / "norain").is_dir():
        rainy_dir, clean_dir = root / "rainy", root / "norain"
    else:
        rainy_dir = clean_dir = root
    rainy = _scan(rainy_dir, pattern_regex(rainy_pattern))
    clean = _scan(clean_dir, pattern_regex(clean_pattern))
    ids = sorted(set(rainy) & set(clean), key=int)
    if not ids:
        raise DatasetError(
            f"no pairs matching {rainy_pattern!r} / {clean_pattern!r} under {root}"
        )
    orphans = [rainy[i] for i in sorted(set(rainy) - set(clean), key=int)]
    orphans += [clean[i] for i in sorted(set(clean) - set(rainy), key=int)]
    for o in orphans:
        logger.warning("unpaired file skipped: %s", o)
    pairs = [RainPair(decode_image(rainy[i]), decode_image(clean[i]), i) for i in ids]
    return PairDataset(pairs, orphans, root, eval_only)


# ---------------------------------------------------------------------------
# patches


def _crop(img: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return img[:, top:top + size, left:left + size]


def patch_corners(shape: tuple[int, int], count: int, size: int,
                  rng: np.random.Generator) -> list[tuple[int, int]]:
    h, w = shape
    tops = rng.integers(0, h - size + 1, size=count)
    lefts = rng.integers(0, w - size + 1, size=count)
    return [(int(t), int(l)) for t, l in zip(tops, lefts)]


def extract_patches(pair: RainPair, count: int = 15, size: int = 100,
                    seed: int | np.random.Generator = 0) -> list[RainPair]:
    """Aligned random crops; the same corners cut the rainy and the clean image."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = pair.rainy.shape[1:]
    if h < size or w < size:
        warnings.warn(
            f"pair {pair.identifier} is {h}x{w}, smaller than patch {size}; "
            "returning it once, reflect-padded",
            stacklevel=2,
        )
        pad = ((0, 0), (0, max(size - h, 0)), (0, max(size - w, 0)))
        rainy = _crop(np.pad(pair.rainy, pad, mode="reflect"), 0, 0, size)
        clean = _crop(np.pad(pair.clean, pad, mode="reflect"), 0, 0, size)
        return [RainPair(rainy, clean, f"{pair.identifier}_p0")]
    return [
        RainPair(_crop(pair.rainy, t, l, size), _crop(pair.clean, t, l, size),
                 f"{pair.identifier}_p{j}")
        for j, (t, l) in enumerate(patch_corners((h, w), count, size, rng))
    ]


def iter_batches(pairs: Sequence[RainPair], batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        yield np.stack([p.rainy for p in chunk]), np.stack([p.clean for p in chunk])
