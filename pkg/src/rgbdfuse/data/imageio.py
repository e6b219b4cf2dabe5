"""Binary Netpbm readers and writers (PPM P6 for RGB, 16-bit PGM P5 for depth and labels)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import FormatError


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise FormatError(f"PPM needs an HxWx3 uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm16(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got {img.shape}")
    h, w = img.shape
    payload = img.astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + payload)


def _header(buf: bytes, n_fields: int) -> tuple[list[bytes], int]:
    fields: list[bytes] = []
    i = 0
    while len(fields) < n_fields:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated Netpbm header")
        fields.append(buf[i:j])
        i = j
    return fields, i + 1  # one whitespace byte separates header and raster


def read_netpbm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), off = _header(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise FormatError(f"unsupported Netpbm magic {magic!r}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = w * h * channels
    if len(buf) - off < n * dtype.itemsize:
        raise FormatError(f"raster truncated in {path}")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off)
    arr = arr.astype(np.uint8 if maxval < 256 else np.uint16)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))
