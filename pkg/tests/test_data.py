import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mhderain.data import (
    HEAVY_RAIN,
    LIGHT_RAIN,
    DatasetError,
    RainPair,
    StreakParams,
    compose_rainy,
    decode_image,
    encode_image,
    extract_patches,
    generate_streaks,
    iter_batches,
    load_pair_dataset,
    synth_dataset,
    synth_pair,
    to_uint8,
    write_pair_dataset,
)


def _rand(shape, seed=0):
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


def test_compose_identities():
    b = _rand((3, 10, 12))
    assert np.array_equal(compose_rainy(b, np.zeros_like(b)), b)
    assert np.array_equal(compose_rainy(np.zeros_like(b), b), b)
    ones = compose_rainy(np.ones_like(b), np.ones_like(b))
    assert np.array_equal(ones, np.ones_like(b))
    gray = _rand((10, 12), seed=1)
    assert np.array_equal(compose_rainy(b, gray), np.clip(b + gray[None], 0, 1))
    with pytest.raises(DatasetError):
        compose_rainy(b, _rand((3, 10, 11)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_compose_never_darkens(seed):
    b = _rand((3, 8, 8), seed)
    r = _rand((8, 8), seed + 1)
    x = compose_rainy(b, r)
    assert x.min() >= 0 and x.max() <= 1
    assert np.all(x >= b) and x.mean() >= b.mean()


def test_streaks_zero_count_gives_empty_layer():
    p = StreakParams(count=(0, 0))
    assert not generate_streaks((32, 32), p).any()


def test_streaks_are_seed_deterministic():
    a = generate_streaks((48, 64), StreakParams(seed=3))
    b = generate_streaks((48, 64), StreakParams(seed=3))
    c = generate_streaks((48, 64), StreakParams(seed=4))
    assert a.shape == (48, 64) and a.dtype == np.float32
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("seed", range(5))
def test_vertical_thin_streak_has_constant_columns(seed):
    # one exactly vertical streak of width 1 with no blur occupies a single column
    p = StreakParams(count=(1, 1), orientation_bands=((90.0, 90.0),), length=(6.0, 10.0),
                     width=(1.0, 1.0), intensity=(0.5, 0.5), blur=0.0, reference_area=None, seed=seed)
    layer = generate_streaks((40, 40), p)
    cols = np.nonzero(layer.any(axis=0))[0]
    if len(cols) == 0:  # streak started above the image and did not reach it
        return
    assert len(cols) == 1
    column = layer[:, cols[0]]
    lit = column[column > 0]
    assert np.var(lit) == 0
    assert float(lit[0]) == pytest.approx(0.5)


def test_streak_orientation_follows_band():
    p = StreakParams(count=(30, 30), orientation_bands=((90.0, 90.0),), width=(1.0, 1.0),
                     blur=0.0, reference_area=None)
    layer = generate_streaks((64, 64), p)
    # vertical streaks: vertical neighbours agree more than horizontal ones
    dv = np.abs(np.diff(layer, axis=0)).sum()
    dh = np.abs(np.diff(layer, axis=1)).sum()
    assert dv < dh


def test_streak_count_scales_with_area():
    # at its reference area the scaled count equals the absolute one
    scaled = generate_streaks((40, 50), StreakParams(reference_area=2000, seed=1))
    absolute = generate_streaks((40, 50), StreakParams(reference_area=None, seed=1))
    assert np.array_equal(scaled, absolute)
    # a quarter of the reference area draws no streaks when the range is (1, 1)
    tiny = StreakParams(count=(1, 1), reference_area=4 * 40 * 50, seed=1)
    assert not generate_streaks((40, 50), tiny).any()


def test_long_streaks_on_small_image_warn():
    with pytest.warns(UserWarning):
        layer = generate_streaks((12, 12), StreakParams(length=(20.0, 30.0)))
    assert layer.shape == (12, 12)


def test_streak_params_validation():
    with pytest.raises(ValueError):
        StreakParams(count=(5, 1))
    with pytest.raises(ValueError):
        StreakParams(intensity=(0.2, 1.5))
    with pytest.raises(ValueError):
        StreakParams(orientation_bands=())
    assert StreakParams.from_dict(HEAVY_RAIN.to_dict()) == HEAVY_RAIN


def test_heavy_rain_degrades_more_than_light():
    from mhderain.losses import psnr
    import torch

    def baseline(p):
        ds = synth_dataset(3, 64, p, seed=0)
        return np.mean([psnr(torch.from_numpy(x.rainy), torch.from_numpy(x.clean)) for x in ds])

    assert baseline(HEAVY_RAIN) < baseline(LIGHT_RAIN) - 5


def test_synth_items_do_not_depend_on_order():
    ds = synth_dataset(4, 32, seed=7)
    alone = synth_pair(2, 32, LIGHT_RAIN, seed=7)
    assert np.array_equal(ds[2].rainy, alone.rainy) and np.array_equal(ds[2].clean, alone.clean)
    assert [p.identifier for p in ds] == ["1", "2", "3", "4"]
    again = synth_dataset(4, 32, seed=7)
    assert all(np.array_equal(a.rainy, b.rainy) for a, b in zip(ds, again))
    assert not np.array_equal(synth_dataset(1, 32, seed=8)[0].clean, ds[0].clean)


def test_eight_bit_round_trip_is_idempotent(tmp_path):
    img = _rand((3, 17, 23), seed=5)
    encode_image(img, tmp_path / "a.png")
    once = decode_image(tmp_path / "a.png")
    assert np.abs(once - img).max() <= 0.5 / 255 + 1e-7
    encode_image(once, tmp_path / "b.png")
    twice = decode_image(tmp_path / "b.png")
    assert np.array_equal(once, twice)
    assert np.array_equal(to_uint8(once), np.asarray(Image.open(tmp_path / "a.png")))


def _write_numbered(directory, ids, size=(12, 10)):
    directory.mkdir(parents=True, exist_ok=True)
    pairs = [RainPair(_rand((3, *size), seed=int(i)), _rand((3, *size), seed=1000 + int(i)), str(i))
             for i in ids]
    return pairs


def test_load_hundred_pairs_with_orphan(tmp_path, caplog):
    pairs = _write_numbered(tmp_path, range(1, 101))
    write_pair_dataset(pairs, tmp_path, manifest={"count": 100})
    encode_image(_rand((3, 12, 10)), tmp_path / "rainy" / "rain-101.png")
    (tmp_path / "rainy" / "notes.txt").write_text("ignored")
    with caplog.at_level("WARNING"):
        ds = load_pair_dataset(tmp_path)
    assert len(ds) == 100
    assert [p.identifier for p in ds] == [str(i) for i in range(1, 101)]
    assert [o.name for o in ds.orphans] == ["rain-101.png"]
    assert "rain-101.png" in caplog.text
    assert json.loads((tmp_path / "manifest").read_text()) == {"count": 100}
    assert ds[0].rainy.shape == (3, 12, 10) and ds[0].rainy.dtype == np.float32


def test_load_flat_rain12_layout_eval_only(tmp_path):
    for i in range(1, 13):
        encode_image(_rand((3, 9, 9), i), tmp_path / f"{i:03d}_in.png")
        encode_image(_rand((3, 9, 9), 100 + i), tmp_path / f"{i:03d}_GT.png")
    ds = load_pair_dataset(tmp_path, "{id}_in.png", "{id}_GT.png", eval_only=True)
    assert len(ds) == 12 and ds.eval_only
    assert [p.identifier for p in ds][:3] == ["001", "002", "003"]
    assert not ds.orphans


def test_load_accepts_jpeg(tmp_path):
    (tmp_path / "rainy").mkdir()
    (tmp_path / "norain").mkdir()
    img = (_rand((16, 16, 3)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "rainy" / "rain-1.jpg")
    Image.fromarray(img).save(tmp_path / "norain" / "norain-1.jpeg")
    ds = load_pair_dataset(tmp_path)
    assert len(ds) == 1 and ds[0].rainy.shape == (3, 16, 16)


def test_load_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_pair_dataset(tmp_path / "missing")
    encode_image(_rand((3, 8, 8)), tmp_path / "rain-1.png")
    with pytest.raises(DatasetError):
        load_pair_dataset(tmp_path)
    with pytest.raises(DatasetError):
        load_pair_dataset(tmp_path, "rain.png", "norain.png")


def test_mismatched_pair_shapes_rejected():
    with pytest.raises(DatasetError):
        RainPair(_rand((3, 8, 8)), _rand((3, 8, 9)), "1")


def test_default_patches_on_481x321():
    pair = RainPair(_rand((3, 321, 481)), _rand((3, 321, 481), 1), "7")
    patches = extract_patches(pair, seed=0)
    assert len(patches) == 15
    assert [p.identifier for p in patches] == [f"7_p{j}" for j in range(15)]
    assert all(p.rainy.shape == (3, 100, 100) for p in patches)
    again = extract_patches(pair, seed=0)
    assert all(np.array_equal(a.rainy, b.rainy) for a, b in zip(patches, again))


def test_patch_of_full_size_is_identity():
    pair = RainPair(_rand((3, 50, 50)), _rand((3, 50, 50), 1), "1")
    (patch,) = extract_patches(pair, count=1, size=50)
    assert np.array_equal(patch.rainy, pair.rainy) and np.array_equal(patch.clean, pair.clean)


def test_patch_alignment_on_100_random_crops():
    rng = np.random.default_rng(0)
    # encode position into the pixels so any misalignment is visible
    h, w = 60, 80
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    clean = np.stack([yy / h, xx / w, np.zeros_like(yy)])
    rainy = clean + 0.5
    pair = RainPair(rainy, clean, "1")
    patches = extract_patches(pair, count=100, size=16, seed=rng)
    assert len(patches) == 100
    for p in patches:
        top, left = int(round(p.clean[0, 0, 0] * h)), int(round(p.clean[1, 0, 0] * w))
        assert np.array_equal(p.clean, clean[:, top:top + 16, left:left + 16])
        assert np.array_equal(p.rainy, rainy[:, top:top + 16, left:left + 16])


def test_small_image_is_padded_with_warning():
    pair = RainPair(_rand((3, 40, 70)), _rand((3, 40, 70), 1), "3")
    with pytest.warns(UserWarning):
        patches = extract_patches(pair, count=15, size=64)
    assert len(patches) == 1
    assert patches[0].rainy.shape == (3, 64, 64)
    assert np.array_equal(patches[0].rainy[:, :40, :64], pair.rainy[:, :, :64])


def test_iter_batches_covers_everything():
    pairs = synth_dataset(5, 16)
    batches = list(iter_batches(pairs, 2))
    assert [b[0].shape[0] for b in batches] == [2, 2, 1]
    assert np.array_equal(batches[-1][1][0], pairs[4].clean)
