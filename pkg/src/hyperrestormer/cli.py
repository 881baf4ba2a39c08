"""Command-line entry point: ``hyper-restormer <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import CONFIG_FORMAT_VERSION, ModelConfig
from .cubeio import read_cube, write_cube
from .degradations import DegradationSpec, bicubic_upsample, degrade
from .errors import ConfigurationError, CubeFormatError, NumericError
from .metrics import evaluate
from .model import build_model, count_macs, count_macs_dense, count_parameters, count_parameters_dense
from .training import PairDataset, TrainConfig, restore, resume, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TASK_KINDS = {"noise": "noise", "stripes": "stripes", "sr": "downsample"}
MODEL_TASKS = {"noise": "denoise", "stripes": "inpaint", "downsample": "superres"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CubeFormatError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"config file {path} is not valid JSON: {exc}") from None


def _run_config(path: str, channels: int | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Parse a run config: ``{"format_version": 1, "model": {...}, "train": {...}}``."""
    data = _load_json(path)
    version = data.get("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported config format_version {version}")
    model = dict(data.get("model", {}))
    if "channels" not in model:
        if channels is None:
            raise ConfigurationError("model.channels is required")
        model["channels"] = channels
    elif channels is not None and model["channels"] != channels:
        raise ConfigurationError(f"config declares {model['channels']} bands but the data has {channels}")
    tcfg = TrainConfig.from_dict(data.get("train", {}))
    # the model's task follows the training degradation unless stated explicitly
    deg = tcfg.degradation
    model.setdefault("task", MODEL_TASKS[deg.kind])
    if deg.kind == "downsample":
        model.setdefault("scale", deg.scale)
    mcfg = ModelConfig.from_dict(model)
    mismatch = mcfg.task != MODEL_TASKS[deg.kind] or (deg.kind == "downsample" and mcfg.scale != deg.scale)
    if "train" in data and mismatch:
        raise ConfigurationError(
            f"model task {mcfg.task!r} (scale {mcfg.scale}) does not match the {deg.kind!r} training degradation"
        )
    return mcfg, tcfg


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--hw expects HxW, got {text!r}") from None
    return h, w


# --------------------------------------------------------------------------
# commands


def cmd_degrade(args) -> None:
    cube = read_cube(args.input)
    data = _load_json(args.spec) if args.spec else {}
    data["kind"] = TASK_KINDS[args.task]
    if args.sigma is not None:
        data["sigma_8bit"] = args.sigma
    if args.scale is not None:
        data["scale"] = args.scale
    if args.seed is not None:
        data["seed"] = args.seed
    if args.clip:
        data["clip"] = True
    spec = DegradationSpec.from_dict(data)
    out, mask = degrade(cube, spec)
    write_cube(args.out, out)
    if args.mask:
        if mask is None:
            mask = np.ones_like(cube)
        write_cube(args.mask, mask)


def _data_cubes(data_dir: str) -> list[np.ndarray]:
    root = Path(data_dir)
    if not root.is_dir():
        raise CubeFormatError(f"data directory {data_dir} does not exist")
    paths = sorted(p.with_suffix("") for p in root.glob("*.hdr"))
    if not paths:
        raise CubeFormatError(f"no cube files (*.hdr sidecars) found in {data_dir}")
    return [read_cube(p) for p in paths]


def cmd_train(args) -> None:
    cubes = _data_cubes(args.data)
    if args.resume:
        model, opt, history, stored = resume(args.resume)
        _, tcfg = _run_config(args.config, cubes[0].shape[0]) if args.config else (None, stored)
        if tcfg is None:
            raise ConfigurationError("resume needs --config or a checkpoint carrying its train config")
    else:
        mcfg, tcfg = _run_config(args.config, cubes[0].shape[0])
        model = build_model(mcfg, tcfg.seed)
        opt, history = None, None
    dataset = PairDataset(cubes, tcfg.degradation, tcfg.resample)
    result = train(model, dataset, tcfg, args.out, opt, history)
    last = result.epochs[-1] if result.epochs else {}
    print(f"steps={model.step} final_train_l1={last.get('train_l1')} val_mpsnr={last.get('val_mpsnr')}")


def _network_input(model, cube: np.ndarray) -> np.ndarray:
    if model.config.task == "superres":
        return bicubic_upsample(cube, model.config.scale)
    return cube


def cmd_restore(args) -> None:
    model = load_checkpoint(args.checkpoint).model
    cube = read_cube(args.input)
    x = _network_input(model, cube)
    out = restore(model, x)
    if not np.isfinite(out).all():
        raise NumericError("restoration produced non-finite values")
    write_cube(args.out, out)


def cmd_evaluate(args) -> None:
    report = evaluate(read_cube(args.ref), read_cube(args.test))
    if args.out:
        Path(args.out).write_text(report.to_text())
    print(f"mpsnr={round(report.mpsnr, 6)}, mssim={round(report.mssim, 6)}, sam={round(report.sam, 6)}")


def cmd_benchmark(args) -> None:
    if args.repeat < 1:
        raise UsageError("--repeat must be positive")
    model = load_checkpoint(args.checkpoint).model
    x = _network_input(model, read_cube(args.input))
    for _ in range(args.warmup):
        restore(model, x)
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        restore(model, x)
        times.append(time.perf_counter() - t0)
    stats = {
        "repeat": args.repeat,
        "mean_s": statistics.fmean(times),
        "std_s": statistics.pstdev(times),
        "min_s": min(times),
        "median_s": statistics.median(times),
        "max_s": max(times),
        "shape": list(x.shape),
    }
    print(json.dumps(stats))


def percentile_stretch(band: np.ndarray, lo: float = 2.0, hi: float = 98.0) -> np.ndarray:
    """Map the ``lo``-``hi`` percentile range of a band onto ``[0, 255]``."""
    a, b = np.percentile(band, [lo, hi])
    if b <= a:
        return np.full(band.shape, np.clip(a, 0.0, 1.0) * 255.0)
    return np.clip((band - a) / (b - a), 0.0, 1.0) * 255.0


def cmd_preview(args) -> None:
    from PIL import Image

    cube = read_cube(args.input)
    try:
        bands = [int(b) for b in args.bands.split(",")]
    except ValueError:
        raise UsageError(f"--bands expects three comma-separated indices, got {args.bands!r}") from None
    if len(bands) != 3:
        raise UsageError(f"--bands expects three indices, got {len(bands)}")
    for b in bands:
        if not 0 <= b < cube.shape[0]:
            raise ConfigurationError(f"band {b} out of range for a {cube.shape[0]}-band cube")
    rgb = np.stack([percentile_stretch(cube[b]) for b in bands], axis=-1)
    Image.fromarray(np.round(rgb).astype(np.uint8), mode="RGB").save(args.out)


def cmd_count(args) -> None:
    mcfg, _ = _run_config(args.config, args.channels)
    h, w = _parse_hw(args.hw) if args.hw else (mcfg.slsst.input_size,) * 2
    params, params_dense = count_parameters(mcfg), count_parameters_dense(mcfg)
    macs, macs_dense = count_macs(mcfg, h, w), count_macs_dense(mcfg, h, w)
    print(f"height={h}")
    print(f"width={w}")
    print(f"parameters={params}")
    print(f"parameters_dense={params_dense}")
    print(f"parameter_ratio={params / params_dense:.6f}")
    print(f"macs={macs}")
    print(f"macs_dense={macs_dense}")
    print(f"mac_ratio={macs / macs_dense:.6f}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyper-restormer", description="Hyperspectral restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("degrade", help="simulate noise, stripes or downsampling")
    d.add_argument("--task", choices=sorted(TASK_KINDS), required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--spec", help="JSON degradation spec")
    d.add_argument("--seed", type=int)
    d.add_argument("--sigma", type=float, help="noise level in 8-bit units")
    d.add_argument("--scale", type=int, choices=(4, 8))
    d.add_argument("--clip", action="store_true", help="clip noisy output to [0, 1]")
    d.add_argument("--out", required=True)
    d.add_argument("--mask", help="also write the observation mask")
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="train a model on a directory of clean cubes")
    t.add_argument("--config", help="JSON run config (required unless resuming)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore a degraded cube")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("evaluate", help="MPSNR / MSSIM / SAM of a test cube")
    e.add_argument("--ref", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("benchmark", help="time restoration of one cube")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--in", dest="input", required=True)
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    v = sub.add_parser("preview", help="render three bands as an 8-bit RGB image")
    v.add_argument("--in", dest="input", required=True)
    v.add_argument("--bands", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_preview)

    c = sub.add_parser("count", help="parameter and multiply-accumulate report")
    c.add_argument("--config", required=True)
    c.add_argument("--hw")
    c.add_argument("--channels", type=int)
    c.set_defaults(func=cmd_count)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, CubeFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
