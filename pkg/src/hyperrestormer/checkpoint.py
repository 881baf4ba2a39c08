"""Checkpoint container.

A checkpoint is a zip archive (numpy ``.npz``) holding one little-endian
IEEE-754 array per learnable tensor under ``param/<name>``, optimizer moments
under ``opt/exp_avg/<name>`` and ``opt/exp_avg_sq/<name>``, and a JSON
document under ``__meta__`` (stored as bytes) with the format version, the
model config, the global step, the seed and optional training metadata.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from .config import ModelConfig
from .errors import CubeFormatError
from .model import HyperRestormer
from .optim import OptimizerState

CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"float32": (torch.float32, np.dtype("<f4")), "float64": (torch.float64, np.dtype("<f8"))}


@dataclass
class Checkpoint:
    model: HyperRestormer
    opt_state: OptimizerState | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def _dtype_name(model: torch.nn.Module) -> str:
    dtypes = {p.dtype for p in model.parameters()}
    if len(dtypes) != 1:
        raise CubeFormatError(f"model mixes parameter dtypes {dtypes}")
    dtype = dtypes.pop()
    for name, (td, _) in _DTYPES.items():
        if td == dtype:
            return name
    raise CubeFormatError(f"unsupported parameter dtype {dtype}")


def save_checkpoint(
    path: str | os.PathLike,
    model: HyperRestormer,
    opt_state: OptimizerState | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    dtype = _dtype_name(model)
    np_dtype = _DTYPES[dtype][1]
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy().astype(np_dtype)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "step": int(model.step),
        "seed": int(model.seed),
        "dtype": dtype,
        "opt_step": None,
    }
    if opt_state is not None:
        meta["opt_step"] = int(opt_state.step)
        for name, t in opt_state.exp_avg.items():
            arrays[f"opt/exp_avg/{name}"] = t.detach().cpu().numpy().astype(np_dtype)
        for name, t in opt_state.exp_avg_sq.items():
            arrays[f"opt/exp_avg_sq/{name}"] = t.detach().cpu().numpy().astype(np_dtype)
    meta.update(extra or {})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise CubeFormatError(f"checkpoint {path} does not exist") from None
    except (ValueError, OSError) as exc:
        raise CubeFormatError(f"checkpoint {path} is not readable: {exc}") from None
    with archive:
        if "__meta__" not in archive.files:
            raise CubeFormatError(f"checkpoint {path} has no metadata record")
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CubeFormatError(f"unknown checkpoint format_version {meta.get('format_version')!r}")
        config = ModelConfig.from_dict(meta["config"])
        torch_dtype = _DTYPES[meta["dtype"]][0]
        model = HyperRestormer(config).to(torch_dtype)
        model.step = int(meta["step"])
        model.seed = int(meta["seed"])
        expected = dict(model.named_parameters())
        stored = {k[len("param/"):] for k in archive.files if k.startswith("param/")}
        if stored != set(expected):
            missing = sorted(set(expected) - stored)
            unexpected = sorted(stored - set(expected))
            raise CubeFormatError(f"checkpoint parameters disagree with its config: missing {missing[:3]}, unexpected {unexpected[:3]}")
        with torch.no_grad():
            for name, p in expected.items():
                arr = archive[f"param/{name}"]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CubeFormatError(f"parameter {name} has shape {arr.shape}, expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))))
        opt_state = None
        if meta.get("opt_step") is not None:
            opt_state = OptimizerState(step=int(meta["opt_step"]))
            for name in expected:
                opt_state.exp_avg[name] = torch.from_numpy(archive[f"opt/exp_avg/{name}"].astype(np.float64)).to(torch_dtype)
                opt_state.exp_avg_sq[name] = torch.from_numpy(archive[f"opt/exp_avg_sq/{name}"].astype(np.float64)).to(torch_dtype)
    return Checkpoint(model=model, opt_state=opt_state, meta=meta)
