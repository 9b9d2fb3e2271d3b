"""Weight checkpoints and vocabulary files.

Checkpoint layout (all integers little-endian u32)::

    b"MIMW" | version | tensor count
    per tensor: rank | dim_0 ... dim_{rank-1} | payload as little-endian float64

Vocabularies are UTF-8 text, one token per line.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np

MAGIC = b"MIMW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(arrays: Sequence[np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype("<f8").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> list[np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out = []
        for _ in range(count):
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(buf):
                raise CheckpointError(f"truncated payload at byte {off}")
            out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64))
            off += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last tensor")
    return out


def save_tensors(arrays: Sequence[np.ndarray], path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(arrays))


def load_tensors(path: str | os.PathLike) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def save_vocab(tokens: Sequence[str], path: str | os.PathLike) -> None:
    for t in tokens:
        if "\n" in t or "\r" in t or not t:
            raise ValueError(f"token {t!r} cannot be stored one-per-line")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(t + "\n" for t in tokens))


def load_vocab(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]
