"""Netpbm (PGM/PPM, ASCII and binary) reading and writing, plus directory loading.

PNG files are decoded through Pillow when it is installed.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

__all__ = ["read_netpbm", "write_netpbm", "read_image", "write_image", "load_images", "ImageDecodeError"]

_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}
_NETPBM_SUFFIXES = {".pgm", ".ppm", ".pnm"}
_PNG_SUFFIXES = {".png"}


class ImageDecodeError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integer header fields, skipping comments; return them and the offset after."""
    tokens = []
    pos = 2
    token_re = re.compile(rb"\s*(#[^\n]*\n\s*)*(\d+)")
    for _ in range(count):
        m = token_re.match(data, pos)
        if m is None:
            raise ImageDecodeError("truncated or malformed netpbm header")
        tokens.append(int(m.group(2)))
        pos = m.end()
    return tokens, pos


def read_netpbm(path) -> tuple[np.ndarray, int]:
    """Return ``(pixels, maxval)`` with pixels as an integer ``(C, H, W)`` array."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in _MAGIC:
        raise ImageDecodeError(f"{path}: not a PGM/PPM file (magic {magic!r})")
    channels, binary = _MAGIC[magic]
    (width, height, maxval), pos = _header_tokens(data, 3)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"{path}: bad dimensions or maxval")
    n = width * height * channels
    if binary:
        if not data[pos:pos + 1].isspace():
            raise ImageDecodeError(f"{path}: missing whitespace after header")
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = np.frombuffer(data, dtype=dtype, count=n, offset=pos) if len(data) - pos >= n * dtype.itemsize else None
        if raw is None:
            raise ImageDecodeError(f"{path}: pixel data truncated")
        pixels = raw.astype(np.int64)
    else:
        body = re.sub(rb"#[^\n]*", b"", data[pos:]).split()
        if len(body) < n:
            raise ImageDecodeError(f"{path}: pixel data truncated")
        pixels = np.array([int(v) for v in body[:n]], dtype=np.int64)
    if pixels.max(initial=0) > maxval:
        raise ImageDecodeError(f"{path}: pixel value exceeds maxval {maxval}")
    return pixels.reshape(height, width, channels).transpose(2, 0, 1), maxval


def write_netpbm(path, image, binary: bool = True) -> None:
    """Write a ``(H, W)``, ``(1, H, W)`` or ``(3, H, W)`` image with values in [0, 1] as 8-bit PGM/PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got shape {img.shape}")
    c, h, w = img.shape
    pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    magic = {(1, True): b"P5", (3, True): b"P6", (1, False): b"P2", (3, False): b"P3"}[(c, binary)]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    if binary:
        payload = pixels.tobytes()
    else:
        payload = "\n".join(" ".join(str(v) for v in row.ravel()) for row in pixels).encode() + b"\n"
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + payload)
    os.replace(tmp, path)


def read_image(path) -> np.ndarray:
    """Decode to a float ``(C, H, W)`` array in [0, 1] (8-bit values map to v / 255)."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in _PNG_SUFFIXES:
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im)
            if arr.dtype == np.uint16:
                maxval = 65535
            else:
                maxval = 255
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr[..., :3].transpose(2, 0, 1)
            return (arr.astype(np.float64) / maxval).astype(np.float32)
        pixels, maxval = read_netpbm(path)
    except ImageDecodeError:
        raise
    except Exception as exc:
        raise ImageDecodeError(f"{path}: cannot decode ({exc})") from exc
    return (pixels / maxval).astype(np.float32)


def write_image(path, image) -> None:
    path = Path(path)
    if path.suffix.lower() in _PNG_SUFFIXES:
        from PIL import Image

        img = np.asarray(image)
        img = img[None] if img.ndim == 2 else img
        pixels = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)).save(path)
    else:
        write_netpbm(path, image)


def load_images(directory) -> tuple[list[str], list[np.ndarray]]:
    """All netpbm/PNG images in ``directory`` in lexicographic order.

    Raises on an empty directory and on any file that fails to decode.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    files = sorted(p for p in directory.iterdir()
                   if p.is_file() and p.suffix.lower() in _NETPBM_SUFFIXES | _PNG_SUFFIXES)
    if not files:
        raise ValueError(f"no PGM/PPM/PNG images in {directory}")
    return [p.name for p in files], [read_image(p) for p in files]
