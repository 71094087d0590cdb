"""Flat binary tensor files and named-tensor archives.

Single tensor record: 8-byte magic ``ADASTNSR``, u32 rank, u32 dims, then the
row-major float64 payload, all little-endian.  An archive is a sequence of
(u32 name length, utf-8 name, tensor record) entries after an ``ADASARCH``
magic and u32 count, with a sidecar ``<path>.manifest`` text file listing
names and shapes for inspection.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"ADASTNSR"
ARCHIVE_MAGIC = b"ADASARCH"


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def pack_tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.astype("<f8").tobytes()


def unpack_tensor(buf: bytes, offset: int, path: str) -> tuple[np.ndarray, int]:
    if buf[offset : offset + 8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad tensor magic at byte {offset}")
    offset += 8
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = offset + 8 * count
    if end > len(buf):
        raise FormatError(f"{path}: truncated payload, need {end} bytes have {len(buf)}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64), end


def write_tensor(path: str | Path, a: np.ndarray) -> None:
    Path(path).write_bytes(pack_tensor(a))


def read_tensor(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    a, end = unpack_tensor(buf, 0, str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor record")
    return a


def write_archive(path: str | Path, named: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [ARCHIVE_MAGIC, struct.pack("<I", len(named))]
    manifest = []
    for name, a in named.items():
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(enc)))
        chunks.append(enc)
        chunks.append(pack_tensor(a))
        manifest.append(f"{name}\t{'x'.join(str(d) for d in np.shape(a)) or 'scalar'}\n")
    path.write_bytes(b"".join(chunks))
    path.with_name(path.name + ".manifest").write_text("".join(manifest), encoding="utf-8")


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: bad archive magic")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + nlen].decode("utf-8")
        offset += nlen
        out[name], offset = unpack_tensor(buf, offset, str(path))
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes after archive")
    return out
