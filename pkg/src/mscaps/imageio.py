"""Single-channel PGM (P5) and PNG reading/writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5)")
    try:
        (_, w, h, maxval), offset = _pgm_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad PGM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    if img.min() < 0 or img.max() > 65535:
        raise ValueError("PGM values must lie in [0, 65535]")
    h, w = img.shape
    if img.max() > 255 or img.dtype == np.uint16:
        maxval, raster = 65535, img.astype(">u2").tobytes()
    else:
        maxval, raster = 255, img.astype(np.uint8).tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + raster)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B", "1", "P"):
            raise ImageFormatError(f"{path}: PNG must be single-channel, got mode {im.mode}")
        arr = np.array(im)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: PNG must be single-channel")
    return arr.astype(np.int64)


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    img = np.asarray(img)
    if img.max(initial=0) > 255:
        Image.fromarray(img.astype(np.uint16)).save(path, format="PNG")
    else:
        Image.fromarray(img.astype(np.uint8)).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Read a PGM or PNG by magic bytes; returns raw integer intensities."""
    head = Path(path).read_bytes()[:8]
    if head[:2] == b"P5":
        return read_pgm(path)
    if head == b"\x89PNG\r\n\x1a\n":
        return read_png(path)
    raise ImageFormatError(f"{path}: unsupported image format (need P5 PGM or PNG)")


def write_image(path, img: np.ndarray) -> None:
    """Write by extension: ``.png`` or anything else as PGM."""
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_pgm(path, img)


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """Linear map of [0, 1] to 8-bit 0..255."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
