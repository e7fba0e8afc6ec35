"""Dependency-free PPM (P6) and PNG reading/writing.

PNG support covers what image regression needs: 8-bit (and 16-bit)
grayscale, RGB, grayscale+alpha and RGBA, non-interlaced. Writing always
produces 8-bit RGB.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    """The file is not a supported PPM or PNG image."""


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# PPM
# --------------------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise ImageFormatError(f"bad PPM header token {data[start:pos]!r}") from None
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (P6) file")
    (width, height, maxval), pos = _ppm_tokens(data, 3)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"bad PPM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * 3 * dtype.itemsize
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"PPM raster truncated: expected {need} bytes, got {len(raster)}")
    img = np.frombuffer(raster, dtype=dtype).reshape(height, width, 3)
    return img.astype(np.float64) / maxval


def encode_ppm(img: np.ndarray) -> bytes:
    px = to_uint8(img)
    h, w = px.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


# --------------------------------------------------------------------------
# PNG
# --------------------------------------------------------------------------


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(kind + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def encode_png(img: np.ndarray) -> bytes:
    px = to_uint8(img)
    if px.ndim == 2:
        px = np.repeat(px[:, :, None], 3, axis=2)
    h, w = px.shape[:2]
    raw = np.concatenate([np.zeros((h, 1), dtype=np.uint8), px[:, :, :3].reshape(h, w * 3)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw.tobytes(), 9)) + _chunk(b"IEND", b"")


_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(raw: np.ndarray, height: int, stride: int, bpp: int) -> np.ndarray:
    rows = raw.reshape(height, stride + 1)
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    for y in range(height):
        ftype, line = rows[y, 0], rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            # left-dependent filters need a sequential pass over pixels
            cur = np.zeros(stride, dtype=np.int32)
            for x in range(0, stride, bpp):
                left = cur[x - bpp : x] if x else np.zeros(bpp, dtype=np.int32)
                up = prev[x : x + bpp]
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + up) >> 1
                else:
                    upleft = prev[x - bpp : x] if x else np.zeros(bpp, dtype=np.int32)
                    pred = _paeth(left, up, upleft)
                cur[x : x + bpp] = (line[x : x + bpp] + pred) & 0xFF
        else:
            raise ImageFormatError(f"bad PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def decode_png(data: bytes) -> np.ndarray:
    if not data.startswith(PNG_SIGNATURE):
        raise ImageFormatError("not a PNG file")
    pos, idat, header = 8, [], None
    while pos + 8 <= len(data):
        length, kind = struct.unpack(">I4s", data[pos : pos + 8])
        payload = data[pos + 8 : pos + 8 + length]
        if len(payload) != length:
            raise ImageFormatError("truncated PNG chunk")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif kind == b"IDAT":
            idat.append(payload)
        elif kind == b"IEND":
            break
    if header is None:
        raise ImageFormatError("PNG has no IHDR chunk")
    width, height, depth, color, _, _, interlace = header
    if color not in _CHANNELS or depth not in (8, 16) or interlace:
        raise ImageFormatError(f"unsupported PNG (color type {color}, depth {depth}, interlace {interlace})")
    channels = _CHANNELS[color]
    bpp = channels * depth // 8
    try:
        raw = np.frombuffer(zlib.decompress(b"".join(idat)), dtype=np.uint8)
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG data: {exc}") from None
    if raw.size != height * (width * bpp + 1):
        raise ImageFormatError("PNG data size does not match header")
    px = _unfilter(raw, height, width * bpp, bpp)
    if depth == 16:
        px = px.reshape(height, width * channels, 2).astype(np.uint16)
        px = (px[..., 0] << 8) | px[..., 1]
    img = px.reshape(height, width, channels).astype(np.float64) / (2**depth - 1)
    if channels in (1, 2):
        img = np.repeat(img[:, :, :1], 3, axis=2)
    return img[:, :, :3]


# --------------------------------------------------------------------------
# file helpers
# --------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read a PPM or PNG file into an (H, W, 3) float array in [0, 1]."""
    data = Path(path).read_bytes()
    if data.startswith(PNG_SIGNATURE):
        return decode_png(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise ImageFormatError(f"{path}: unsupported image format (expected PPM P6 or PNG)")


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    data = encode_png(img) if path.suffix.lower() == ".png" else encode_ppm(img)
    path.write_bytes(data)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image size {w}x{h}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top : top + size, left : left + size]
