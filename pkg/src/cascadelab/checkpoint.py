"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"HFCK"
    u32   version
    u32   header length, then that many bytes of UTF-8 JSON (model metadata)
    u32   tensor count
    per tensor:
        u32  name length, UTF-8 name
        u32  rank
        u64  extents[rank]
        f32  data[prod(extents)]   (row-major)

Tensors are written in sorted-name order so identical parameters always give
identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _read_exact(f: io.BufferedIOBase, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def dumps(tensors: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    hdr = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(struct.pack("<I", len(hdr)))
    out.write(hdr)
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", arr.ndim))
        out.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        out.write(arr.tobytes())
    return out.getvalue()


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    f = io.BytesIO(blob)
    if _read_exact(f, 4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
    header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
        name = _read_exact(f, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name}"))
        shape = tuple(int(x) for x in np.frombuffer(_read_exact(f, 8 * rank, f"extents of {name}"), dtype="<u8"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_read_exact(f, 4 * n, f"data of {name}"), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if f.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return header, tensors


def save(path: str | Path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, header))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
