"""Binary PPM (P6) / PGM (P5) reading and writing.

Images are returned as float64 arrays scaled to [0, 1]: (H, W, 3) for PPM,
(H, W) for PGM. PNG is read and written through Pillow when it is installed.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ImageFormatError
from .fsutil import atomic_write

NETPBM_SUFFIXES = {".ppm", ".pgm", ".pnm"}


def _tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens and the offset after them."""
    out = []
    pos = 0
    n = len(data)
    while len(out) < count:
        while pos < n and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm type {magic!r}; only binary P5/P6")
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("non-numeric netpbm header field") from exc
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise ImageFormatError(f"invalid netpbm header {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(data) - offset < count * dtype.itemsize:
        raise ImageFormatError("truncated netpbm raster")
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    img = raw.astype(np.float64) / maxval
    return img.reshape(height, width, 3) if channels == 3 else img.reshape(height, width)


def encode_netpbm(image: np.ndarray, maxval: int = 255) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot store an array of shape {img.shape} as PPM/PGM")
    q = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5)
    raster = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + raster


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return decode_netpbm(data)
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: not a binary PPM/PGM file (install Pillow for other formats)") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L" if im.mode in ("L", "I;16", "1") else "RGB"))
    except Exception as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray):
    path = Path(path)
    if path.suffix.lower() in NETPBM_SUFFIXES:
        atomic_write(path, encode_netpbm(image))
        return
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: only .ppm/.pgm output is available without Pillow") from None
    arr = np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format=path.suffix.lstrip(".").upper() or "PNG")
    atomic_write(path, buf.getvalue())
