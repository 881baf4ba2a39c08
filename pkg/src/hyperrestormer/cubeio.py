"""Minimal band-sequential cube format.

A cube lives in two files: ``<path>`` holds little-endian float32 samples,
all of band 0 then band 1 and so on (sample ``(b, r, c)`` at float offset
``b*H*W + r*W + c``), and ``<path>.hdr`` is a JSON header::

    {"format_version": 1, "channels": C, "height": H, "width": W,
     "dtype": "f32", "layout": "band-sequential", "value_range": [lo, hi]}
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CubeFormatError

CUBE_FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def header_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".hdr")


def write_cube(path: str | os.PathLike, cube: np.ndarray) -> None:
    cube = np.asarray(cube)
    if cube.ndim == 2:
        cube = cube[None]
    if cube.ndim != 3:
        raise CubeFormatError(f"cubes are C x H x W arrays, got shape {cube.shape}")
    data = np.ascontiguousarray(cube, dtype=_DTYPE)
    c, h, w = data.shape
    finite = data[np.isfinite(data)]
    header = {
        "format_version": CUBE_FORMAT_VERSION,
        "channels": c,
        "height": h,
        "width": w,
        "dtype": "f32",
        "layout": "band-sequential",
        "value_range": [float(finite.min()), float(finite.max())] if finite.size else [0.0, 0.0],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data.tobytes(order="C"))
    header_path(path).write_text(json.dumps(header, indent=2) + "\n")


def read_header(path: str | os.PathLike) -> dict:
    hp = header_path(path)
    try:
        header = json.loads(hp.read_text())
    except FileNotFoundError:
        raise CubeFormatError(f"missing cube header {hp}") from None
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"cube header {hp} is not valid JSON: {exc}") from None
    version = header.get("format_version")
    if version != CUBE_FORMAT_VERSION:
        raise CubeFormatError(f"unknown cube format_version {version!r} in {hp}")
    if header.get("dtype") != "f32" or header.get("layout") != "band-sequential":
        raise CubeFormatError(f"{hp}: only f32 band-sequential cubes are supported")
    for key in ("channels", "height", "width"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise CubeFormatError(f"{hp}: '{key}' must be a positive integer")
    return header


def read_cube(path: str | os.PathLike) -> np.ndarray:
    header = read_header(path)
    c, h, w = header["channels"], header["height"], header["width"]
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CubeFormatError(f"missing cube payload {path}") from None
    expected = c * h * w
    if len(raw) != 4 * expected:
        got = len(raw) / 4
        got_s = str(int(got)) if got == int(got) else f"{got:.2f}"
        raise CubeFormatError(
            f"{path}: header declares {c}x{h}x{w} = expected {expected} floats, payload holds {got_s}"
        )
    return np.frombuffer(raw, dtype=_DTYPE).reshape(c, h, w).astype(np.float32)
