"""Binary container for named float64 tensors.

Layout (all integers little-endian)::

    magic    4 bytes  b"BDAS"
    version  u16
    count    u32
    count x entry:
        name length  u16
        name         UTF-8 bytes
        rank         u8
        dims         rank x u32
        data         prod(dims) x f64
    crc32    u32      over every preceding byte

Used for checkpoints and for dataset dumps written by ``sketret generate``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"BDAS"
FORMAT_VERSION = 1

__all__ = [
    "ContainerError",
    "ChecksumError",
    "VersionError",
    "MAGIC",
    "FORMAT_VERSION",
    "encode_tensors",
    "decode_tensors",
    "write_tensors",
    "read_tensors",
    "text_tensor",
    "tensor_text",
]


class ContainerError(ValueError):
    """Malformed or truncated tensor container."""


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize ``tensors`` in insertion order."""
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} too large for {name}")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise ContainerError("bad magic bytes, not a BDAS container")
    if len(blob) < 14:
        raise ContainerError("truncated container header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(
            f"container version {version} is not supported (expected {FORMAT_VERSION})"
        )
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch, file is corrupt or truncated")

    (count,) = struct.unpack_from("<I", body, 6)
    offset = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", body, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * size > len(body):
                raise ContainerError(f"truncated data for tensor {name!r}")
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            if name in out:
                raise ContainerError(f"duplicate tensor name {name!r}")
            out[name] = arr.reshape(shape).astype(np.float64)
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if offset != len(body):
        raise ContainerError(f"{len(body) - offset} trailing bytes after last entry")
    return out


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def text_tensor(text: str) -> np.ndarray:
    """ASCII string as a float64 vector of byte values, for metadata entries."""
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8).astype(np.float64)


def tensor_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8).tolist()).decode("ascii")
