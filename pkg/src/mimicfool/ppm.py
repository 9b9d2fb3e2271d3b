"""Binary PPM (P6, maxval 255) reader and writer."""

from __future__ import annotations

import os

import numpy as np

from .validation import check_image_u8


class PpmError(ValueError):
    """Malformed or unsupported PPM data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_ppm(image) -> bytes:
    img = check_image_u8(image)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def _header_tokens(buf: bytes, count: int) -> tuple[list[tuple[int, bytes]], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise PpmError("truncated header", i)
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        tokens.append((start, buf[start:i]))
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not buf[i:i + 1].isspace():
        raise PpmError("expected single whitespace after maxval", i)
    return tokens, i + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise PpmError(f"bad magic {buf[:2]!r}, expected b'P6'", 0)
    tokens, data_start = _header_tokens(buf[2:], 3)
    values = []
    for off, tok in tokens:
        if not tok.isdigit():
            raise PpmError(f"non-numeric header field {tok!r}", off + 2)
        values.append((int(tok), off + 2))
    (w, w_off), (h, h_off), (maxval, m_off) = values
    if w <= 0:
        raise PpmError(f"width must be positive, got {w}", w_off)
    if h <= 0:
        raise PpmError(f"height must be positive, got {h}", h_off)
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}, only 255 is accepted", m_off)
    data_start += 2
    need = w * h * 3
    raster = buf[data_start:data_start + need]
    if len(raster) < need:
        raise PpmError(f"truncated raster: need {need} bytes, have {len(raster)}", data_start + len(raster))
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
