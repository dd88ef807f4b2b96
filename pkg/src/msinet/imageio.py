"""PNG and binary PNM (P5/P6) image I/O, plus the plain-text fixation format."""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .fixations import FixationError, FixationMap
from .weights import atomic_write_bytes


class ImageFormatError(ValueError):
    pass


class FixationFileError(FixationError):
    pass


_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _parse_pnm(raw: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM type {magic!r}; only binary P5/P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"malformed PNM header: {exc}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PNM dimensions {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    if len(raw) - pos < count * dtype.itemsize:
        raise ImageFormatError("PNM raster shorter than header promises")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    arr = data.reshape(height, width, channels).transpose(2, 0, 1)
    return arr.astype(np.float64) / maxval


def encode_pnm(image: np.ndarray, maxval: int = 255) -> bytes:
    """Encode a (C, H, W) or (H, W) array in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    channels, height, width = arr.shape
    if channels not in (1, 3):
        raise ImageFormatError(f"PNM needs 1 or 3 channels, got {channels}")
    magic = b"P5" if channels == 1 else b"P6"
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.round(np.clip(arr, 0.0, 1.0) * maxval).astype(dtype)
    header = magic + b"\n%d %d\n%d\n" % (width, height, maxval)
    return header + q.transpose(1, 2, 0).tobytes()


def load_image(path) -> np.ndarray:
    """Read an image as a float (C, H, W) array in [0, 1]; C is 1 for grey, 3 for colour."""
    raw = Path(path).read_bytes()
    if raw[:2] in (b"P5", b"P6"):
        return _parse_pnm(raw)
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    if img.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(img, dtype=np.float64)[None] / 65535.0
    elif img.mode == "L":
        arr = np.asarray(img, dtype=np.float64)[None] / 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    if arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ImageFormatError(f"degenerate image {path}")
    return arr


def to_rgb(image: np.ndarray) -> np.ndarray:
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image


def save_image(path, image: np.ndarray) -> None:
    """Write a (C, H, W) float image; ``.png`` through Pillow, ``.pgm``/``.ppm`` natively."""
    path = Path(path)
    arr = np.asarray(image)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        atomic_write_bytes(path, encode_pnm(arr))
        return
    q = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_fixations(path, shape: tuple[int, int]) -> FixationMap:
    """Parse one "row col" pair per line; blank lines are skipped."""
    height, width = shape
    points = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FixationFileError(f"{path}:{lineno}: expected 'row col', got {line!r}")
        try:
            r, c = int(parts[0]), int(parts[1])
        except ValueError:
            raise FixationFileError(f"{path}:{lineno}: non-integer coordinate in {line!r}") from None
        if not (0 <= r < height and 0 <= c < width):
            raise FixationFileError(
                f"{path}:{lineno}: fixation ({r}, {c}) out of bounds for {height}x{width} image"
            )
        points.append((r, c))
    return FixationMap.from_points(points, height, width)


def save_fixations(path, fixations: FixationMap) -> None:
    text = "".join(f"{r} {c}\n" for r, c in fixations.locations)
    atomic_write_bytes(path, text.encode("utf-8"))
