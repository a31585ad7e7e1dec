"""Binary PGM (P5) reading and writing for 8-bit grayscale images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError


class PgmError(ContractError):
    """The file is not a readable 8-bit binary PGM."""


def _header_fields(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    fields, pos = [], 0
    while len(fields) < count:
        if pos >= len(blob):
            raise PgmError("truncated PGM header")
        c = blob[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
                pos += 1
            fields.append(blob[start:pos])
    return fields, pos


def read_pgm(path) -> np.ndarray:
    """Image as float64 in ``[0, 1]`` with shape ``[height, width]``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PgmError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        fields, pos = _header_fields(blob, 4)
    except PgmError as exc:
        raise PgmError(f"{path}: {exc}") from None
    if fields[0] != b"P5":
        raise PgmError(f"{path}: expected a binary PGM (P5), found {fields[0][:8]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise PgmError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise PgmError(f"{path}: unsupported PGM geometry {width}x{height}, maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    data = blob[pos:pos + width * height]
    if len(data) != width * height:
        raise PgmError(f"{path}: raster has {len(data)} bytes, expected {width * height}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, img: np.ndarray) -> None:
    """Write ``img`` (values in ``[0, 1]``) as an 8-bit P5 file."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"write_pgm needs a 2-D image, got shape {img.shape}")
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raster.tobytes())
