"""Command-line entry point: synth, train, eval, derain, ablate, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .ablation import (
    AXES,
    DESK_TEST_COUNT,
    AblationDataset,
    AblationGrid,
    desk_base,
    parse_axis_values,
    run_grid,
)
from .blocks import ConfigError
from .config import SYNTH_PRESETS, RunConfig, build_run_config, read_config_file
from .data import (
    IMAGE_SUFFIXES,
    DatasetError,
    decode_image,
    encode_image,
    load_pair_dataset,
    pattern_regex,
    synth_dataset,
    write_pair_dataset,
)
from .network import MHDerainNet
from .report import load_runs, write_report
from .training import evaluate, load_checkpoint, model_from_checkpoint, split_by_hash, train

logger = logging.getLogger("mhderain")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _entries(args) -> dict[str, str]:
    """Config file entries, then ``--set`` overrides."""
    entries = read_config_file(args.config) if args.config else {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        entries[key.strip()] = value.strip()
    return entries


def _resolve(args, base: RunConfig | None = None, extra: dict[str, str] | None = None) -> RunConfig:
    entries = _entries(args)
    entries.update(extra or {})
    if args.seed is not None:
        for key in ("seed", "net.seed", "train.seed", "data.synth_seed"):
            entries[key] = str(args.seed)
    return build_run_config(entries, base)


def _explicit_network(args) -> bool:
    return any(k.startswith("net.") for k in _entries(args))


def _out_dir(args, default: str) -> Path:
    return Path(args.out or default)


def _require_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")


def _load_model(args, checkpoint: str, cfg: RunConfig) -> MHDerainNet:
    state = load_checkpoint(checkpoint, cfg.network if _explicit_network(args) else None)
    return model_from_checkpoint(state)


def _image_files(inputs: list[str]) -> list[Path]:
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        elif p.exists():
            files.append(p)
        else:
            raise DatasetError(f"input not found: {p}")
    return files


def _truth_for(image: Path, truth: Path | None, cfg: RunConfig, single: bool) -> Path | None:
    if truth is None:
        return None
    if truth.is_file():
        return truth if single else None
    same = truth / image.name
    if same.is_file():
        return same
    m = pattern_regex(cfg.data.rainy_pattern).fullmatch(image.name)
    if m:
        name = cfg.data.clean_pattern.format(id=m.group(1))
        for candidate in (name, *(Path(name).stem + ext for ext in IMAGE_SUFFIXES)):
            if (truth / candidate).is_file():
                return truth / candidate
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    extra = {}
    if args.count is not None:
        extra["data.synth_count"] = str(args.count)
    if args.size is not None:
        extra["data.synth_size"] = str(args.size)
    if args.heavy:
        extra["data.synth_preset"] = "heavy"
    cfg = _resolve(args, extra=extra)
    out = _out_dir(args, "data/synth")
    _require_empty(out, args.force)
    for sub in ("rainy", "norain"):
        shutil.rmtree(out / sub, ignore_errors=True)
    d = cfg.data
    pairs = synth_dataset(d.synth_count, d.synth_size, d.streaks(), seed=d.synth_seed)
    manifest = {
        "count": d.synth_count,
        "size": d.synth_size,
        "seed": d.synth_seed,
        "preset": d.synth_preset,
        "streaks": d.streaks().to_dict(),
        "rainy_pattern": d.rainy_pattern,
        "clean_pattern": d.clean_pattern,
        "identifiers": [p.identifier for p in pairs],
        "version": __version__,
    }
    write_pair_dataset(pairs, out, manifest, d.rainy_pattern, d.clean_pattern)
    cfg.write(out)
    print(f"wrote {len(pairs)} {d.synth_preset} pairs of {d.synth_size}x{d.synth_size} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {"data.train_dir": args.dataset} if args.dataset else {}
    if args.val:
        extra["data.val_dir"] = args.val
    base = None
    if args.resume:
        # start from the checkpoint's own configs; config entries and --set apply on top
        state = load_checkpoint(args.resume)
        base = RunConfig.from_dict({**RunConfig().to_dict(), "network": state["network_config"],
                                    "train": state["train_config"]})
    cfg = _resolve(args, base=base, extra=extra)
    if not cfg.data.train_dir:
        raise UsageError("train needs a dataset directory (argument or data.train_dir)")
    out = _out_dir(args, "runs/train")
    if not args.resume:
        _require_empty(out, args.force)
    d = cfg.data
    dataset = load_pair_dataset(d.train_dir, d.rainy_pattern, d.clean_pattern)
    val = load_pair_dataset(d.val_dir, d.rainy_pattern, d.clean_pattern) if d.val_dir else None
    torch.manual_seed(cfg.train.seed)
    model = MHDerainNet(cfg.network)
    cfg.write(out)
    print("epoch,lr,mean_loss,mean_ssim_val,mean_psnr_val")
    result = train(model, dataset, cfg.train, out_dir=out, val_dataset=val, resume=args.resume,
                   on_epoch=lambda r: print(r.line(), flush=True))
    print(f"trained {result.steps} steps; checkpoint at {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    extra = {"data.test_dir": args.dataset} if args.dataset else {}
    cfg = _resolve(args, extra=extra)
    if not cfg.data.test_dir:
        raise UsageError("eval needs a dataset directory (argument or data.test_dir)")
    model = _load_model(args, args.checkpoint, cfg)
    cfg = replace(cfg, network=model.cfg)
    d = cfg.data
    dataset = load_pair_dataset(d.test_dir, d.rainy_pattern, d.clean_pattern, eval_only=True)
    report = evaluate(model, dataset, cfg.train.loss.ssim)
    report.config = cfg.to_dict()
    out = _out_dir(args, "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    cfg.write(out)
    print(report.summary())
    return EXIT_OK


def cmd_derain(args) -> int:
    cfg = _resolve(args)
    model = _load_model(args, args.checkpoint, cfg)
    cfg = replace(cfg, network=model.cfg)
    files = _image_files(args.inputs)
    out = _out_dir(args, "runs/derain")
    out.mkdir(parents=True, exist_ok=True)
    truth = Path(args.truth) if args.truth else None
    written, skipped = 0, []
    for f in files:
        try:
            rainy = decode_image(f)
            with torch.no_grad():
                derained = model(torch.from_numpy(rainy)[None]).derained[0].numpy()
        except (DatasetError, ValueError) as exc:
            logger.warning("skipping %s: %s", f, exc)
            skipped.append(f)
            continue
        encode_image(derained, out / f"{f.stem}_derained.png")
        if args.triptych:
            panels = [rainy, derained]
            t = _truth_for(f, truth, cfg, single=len(files) == 1)
            if t is not None:
                clean = decode_image(t)
                if clean.shape == rainy.shape:
                    panels.append(clean)
                else:
                    logger.warning("truth %s has shape %s, expected %s; omitted", t, clean.shape, rainy.shape)
            encode_image(np.concatenate(panels, axis=2), out / f"{f.stem}_triptych.png")
        written += 1
    cfg.write(out)
    print(f"derained {written} image(s) into {out}")
    if skipped:
        print(f"skipped {len(skipped)} undecodable or unusable file(s): "
              + ", ".join(str(s) for s in skipped))
    return EXIT_OK if written else EXIT_RUNTIME


def _ablation_datasets(args, cfg: RunConfig) -> list[AblationDataset]:
    d = cfg.data
    specs = list(args.dataset or [])
    if not specs and d.train_dir:
        specs = [f"{Path(d.train_dir).name}={d.train_dir}" + (f",{d.test_dir}" if d.test_dir else "")]
    if specs:
        datasets = []
        for spec in specs:
            name, sep, paths = spec.partition("=")
            if not sep:
                raise UsageError(f"--dataset expects NAME=TRAIN_DIR[,TEST_DIR], got {spec!r}")
            train_dir, _, test_dir = paths.partition(",")
            train_set = load_pair_dataset(train_dir, d.rainy_pattern, d.clean_pattern)
            if test_dir:
                test_set = load_pair_dataset(test_dir, d.rainy_pattern, d.clean_pattern)
            else:
                train_set, test_set = split_by_hash(train_set, 0.1)
                if not test_set or not train_set:
                    raise DatasetError(f"dataset {name} too small to hold out a test split")
            datasets.append(AblationDataset(name, train_set, test_set))
        return datasets
    if args.full_scale:
        raise UsageError("--full-scale needs real data: --dataset NAME=TRAIN[,TEST] or data.train_dir")
    datasets = []
    for preset in SYNTH_PRESETS:
        pairs = synth_dataset(d.synth_count + DESK_TEST_COUNT, d.synth_size,
                              SYNTH_PRESETS[preset], seed=d.synth_seed)
        datasets.append(AblationDataset(f"synthetic-{preset}", pairs[:d.synth_count],
                                        pairs[d.synth_count:]))
    return datasets


def cmd_ablate(args) -> int:
    base = RunConfig() if args.full_scale else desk_base()
    cfg = _resolve(args, base=base)
    axes = args.axis or list(AXES)
    overrides = {}
    for item in args.values or []:
        axis, sep, text = item.partition("=")
        if not sep or axis not in AXES:
            raise UsageError(f"--values expects AXIS=V1,V2,... with AXIS in {AXES}, got {item!r}")
        overrides[axis] = parse_axis_values(axis, text)
    grids = [AblationGrid(axis, overrides.get(axis, ()), cfg) for axis in axes]
    out = _out_dir(args, "runs/ablate")
    _require_empty(out, args.force)
    datasets = _ablation_datasets(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    for grid in grids:
        table = run_grid(grid, datasets, out)
        path = out / f"ablation_{grid.axis}.csv"
        path.write_text(table.to_csv())
        print(f"# {grid.axis} -> {path}")
        print(table.to_csv(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _resolve(args)
    runs = load_runs(args.histories)
    out = _out_dir(args, "runs/report")
    for path in write_report(runs, out):
        print(path)
    cfg.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides config seeds)")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--force", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="allow writing into a non-empty output directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", default=default,
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="mhderain", description="Multi-stream single-image deraining.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic rainy/clean dataset")
    p.add_argument("--count", type=int, help="number of pairs")
    p.add_argument("--size", type=int, help="square image size in pixels")
    p.add_argument("--heavy", action="store_true", help="dense multi-direction rain preset")

    p = add("train", cmd_train, "train a model on a paired dataset")
    p.add_argument("dataset", nargs="?", help="training dataset directory")
    p.add_argument("--val", help="validation dataset directory (default: hash split)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("eval", cmd_eval, "score a checkpoint on a paired dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset", nargs="?", help="test dataset directory")

    p = add("derain", cmd_derain, "derain single images or directories")
    p.add_argument("checkpoint")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--truth", help="ground-truth image or directory for the triptych")
    p.add_argument("--triptych", action="store_true", help="also write rainy|derained[|truth] panels")

    p = add("ablate", cmd_ablate, "run ablation grids and write one table per axis")
    p.add_argument("--axis", action="append", choices=AXES, help="axis to run (repeatable; default all)")
    p.add_argument("--values", action="append", metavar="AXIS=VALUES",
                   help="override an axis' variants, e.g. lambda_p=0.1,1 or stream_count=3;3,5")
    p.add_argument("--dataset", action="append", metavar="NAME=TRAIN[,TEST]",
                   help="dataset row (repeatable; default synthetic light and heavy)")
    p.add_argument("--full-scale", action="store_true",
                   help="start from the full-size defaults instead of the desk-scale base")

    p = add("report", cmd_report, "plot training histories and write a summary")
    p.add_argument("histories", nargs="+", metavar="[NAME=]HISTORY")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mhderain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"mhderain {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
