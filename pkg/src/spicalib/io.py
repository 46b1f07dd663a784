"""Readers and writers for the on-disk formats.

* PFM grayscale (``Pf``) and colour (``PF``): little-endian float32, scale
  ``-1.0``, rows stored bottom-to-top.  Arrays are ``(H, W)`` / ``(H, W, 3)``
  with row 0 at the top.
* PGM (``P5``, maxval 255) for masks: 0 invalid, 255 valid.
* ASCII PLY point clouds, vertex properties ``x y z`` in millimetres.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError


class FormatError(ConfigError):
    """File contents do not match the expected format."""


def _read_header_tokens(f, count: int) -> list[bytes]:
    tokens: list[bytes] = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise FormatError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        tag = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = "PF"
    else:
        raise FormatError(f"cannot store array of shape {img.shape} as PFM")
    h, w = img.shape[:2]
    data = np.ascontiguousarray(np.flipud(img).astype("<f4"))
    with open(path, "wb") as f:
        f.write(f"{tag}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag == b"Pf":
            channels = 1
        elif tag == b"PF":
            channels = 3
        else:
            raise FormatError(f"{path}: not a PFM file")
        w, h = (int(x) for x in _read_header_tokens(f, 2))
        scale = float(_read_header_tokens(f, 1)[0])
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise FormatError(f"{path}: expected {w * h * channels} floats, found {data.size}")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_pgm_mask(path, mask) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def read_pgm_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise FormatError(f"{path}: not a binary PGM")
        w, h, maxval = (int(x) for x in _read_header_tokens(f, 3))
        if maxval > 255:
            raise FormatError(f"{path}: 16-bit PGM not supported")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape(h, w) > 0


def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for x, y, z in pts:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path) -> np.ndarray:
    with open(path, encoding="ascii") as f:
        if f.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        count = None
        props: list[str] = []
        in_vertex = False
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported")
            if parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    count = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if count is None or not {"x", "y", "z"} <= set(props):
            raise FormatError(f"{path}: missing vertex x/y/z")
        cols = [props.index(k) for k in ("x", "y", "z")]
        rows = [f.readline().split() for _ in range(count)]
    try:
        data = np.array([[float(r[c]) for c in cols] for r in rows], dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: bad vertex data ({exc})") from exc
    return data.reshape(-1, 3)


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text + "\n")
    os.replace(tmp, path)


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
