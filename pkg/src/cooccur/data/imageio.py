"""Binary PPM/PGM reading and writing, plus optional PNG input through Pillow.

Images are ``(H, W, 3)`` float64 arrays with channels in [0, 1].
"""
from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np


class IngestionError(ValueError):
    pass


_PNG_SIG = b"\x89PNG\r\n\x1a\n"
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes, magic: bytes, n_fields: int):
    if not buf.startswith(magic):
        raise IngestionError(f"expected {magic.decode()} header")
    pos = len(magic)
    values = []
    for _ in range(n_fields):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise IngestionError("truncated header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise IngestionError(f"bad header field {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise IngestionError("missing whitespace after header")
    return values, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    (w, h, maxval), pos = _parse_header(buf, b"P6", 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise IngestionError(f"bad PPM dimensions {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * 3 * dtype.itemsize
    if len(buf) - pos < need:
        raise IngestionError(f"truncated PPM payload ({len(buf) - pos} of {need} bytes)")
    raw = np.frombuffer(buf, dtype=dtype, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def encode_ppm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (w, h) + data.tobytes()


def write_ppm(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_pgm16(labels) -> bytes:
    """Integer label map as P5 with maxval 65535."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("labels must fit in 16 bits")
    h, w = labels.shape
    return b"P5\n%d %d\n65535\n" % (w, h) + labels.astype(">u2").tobytes()


def decode_pgm16(buf: bytes) -> np.ndarray:
    (w, h, maxval), pos = _parse_header(buf, b"P5", 3)
    if maxval != 65535:
        raise IngestionError("region maps must be 16-bit PGM (maxval 65535)")
    need = w * h * 2
    if len(buf) - pos < need:
        raise IngestionError("truncated PGM payload")
    return np.frombuffer(buf, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def write_pgm16(path, labels) -> None:
    Path(path).write_bytes(encode_pgm16(labels))


def read_pgm16(path) -> np.ndarray:
    return decode_pgm16(Path(path).read_bytes())


def load_image(path) -> np.ndarray:
    """Read a P6 PPM (or an 8-bit PNG when Pillow is available) into [0, 1] floats."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if buf.startswith(b"P6"):
        return decode_ppm(buf)
    if buf.startswith(_PNG_SIG):
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover
            raise IngestionError("PNG input needs Pillow") from None
        try:
            with Image.open(io.BytesIO(buf)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        except Exception as exc:
            raise IngestionError(f"bad PNG {path}: {exc}") from exc
        return arr / 255.0
    raise IngestionError(f"unsupported image format: {path}")
