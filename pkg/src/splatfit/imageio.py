"""Minimal portable-pixmap I/O (binary P5/P6, 8 or 16 bit) plus optional PNG."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _quantize(img: np.ndarray, maxval: int) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint16 if maxval > 255 else np.uint8)


def write_ppm(path, image: np.ndarray, bits: int = 16) -> None:
    """Write an (H, W, 3) color or (H, W) gray float image in [0, 1]."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    image = np.asarray(image, dtype=np.float64)
    maxval = 255 if bits == 8 else 65535
    magic = b"P6" if image.ndim == 3 else b"P5"
    h, w = image.shape[:2]
    data = _quantize(image, maxval)
    if bits == 16:
        data = data.astype(">u2")
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        fh.write(data.tobytes())


def write_gray_u8(path, gray: np.ndarray) -> None:
    """Write an already-quantized uint8 (H, W) array as P5."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(gray.tobytes())


def _tokens(raw: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(raw[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read P5/P6 into float64 in [0, 1]; samples above maxval are an error."""
    raw = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _tokens(raw, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ImageFormatError, ValueError) as exc:
        raise ImageFormatError(f"{path}: malformed PNM header") from exc
    if magic not in (b"P5", b"P6") or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: unsupported PNM variant")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    body = raw[pos : pos + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(body, dtype=dtype).astype(np.int64)
    if (data > maxval).any():
        raise ImageFormatError(f"{path}: pixel value exceeds maxval {maxval}")
    img = data.reshape((h, w, channels) if channels == 3 else (h, w)).astype(np.float64) / maxval
    return img


def write_image(path, image: np.ndarray) -> None:
    path = os.fspath(path)
    if path.endswith(".png"):
        from PIL import Image

        Image.fromarray(_quantize(np.asarray(image), 255)).save(path)
    else:
        write_ppm(path, image)


def read_image(path) -> np.ndarray:
    path = os.fspath(path)
    if path.endswith(".png"):
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return read_ppm(path)
