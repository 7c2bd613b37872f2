"""Atomic CSV and binary PGM (P5) writers."""

from __future__ import annotations

import csv
import io
import re
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write


def pgm_bytes(image: np.ndarray) -> bytes:
    """Encode a 2-D array with values in [0, 1] as 8-bit P5 with maxval 255."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {image.shape}")
    pix = np.clip(np.rint(np.nan_to_num(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def write_pgm(path, image: np.ndarray) -> Path:
    atomic_write(path, pgm_bytes(image))
    return Path(path)


def read_pgm(path) -> np.ndarray:
    """Parse a P5 file written by ``write_pgm``; returns uint8 pixels."""
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = buf[m.end():]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, np.uint8).reshape(h, w)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    """Write ``rows`` (sequences or dicts keyed by ``header``) atomically."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(k, "") for k in header]
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} columns, header has {len(header)}")
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue().encode())
    return Path(path)
