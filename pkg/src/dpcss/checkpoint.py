"""Flat binary checkpoint of named float64 arrays.

Layout (all integers little-endian)::

    b"DPCSSCKP"            8-byte magic
    uint32 version         currently 1
    uint32 n_arrays
    n_arrays times:
        uint16 name_len, name (utf-8)
        uint8  ndim, ndim x uint32 dims
        prod(dims) x float64 (little-endian, row-major)

A sidecar ``<path>.manifest.txt`` lists ``name<TAB>shape`` per array.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPCSSCKP"
VERSION = 1


class CheckpointError(IOError):
    pass


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.txt")


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    lines = [f"# {MAGIC.decode()} v{VERSION}: {len(arrays)} arrays"]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
        lines.append(f"{name}\t{'x'.join(str(n) for n in arr.shape) or 'scalar'}")
    path.write_bytes(b"".join(chunks))
    manifest_path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:8]!r})")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(blob):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    return out
