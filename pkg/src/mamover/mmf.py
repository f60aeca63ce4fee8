"""MMF1 binary container for numeric arrays.

A block is: magic b"MMF1", u32 LE version (=1), u32 LE rank, rank u32 LE
dims, then the float64 LE payload in row-major (C) order.

Multi-array files prepend a table of u64 LE absolute byte offsets, one per
block.  Moved meshes store two blocks (x-coords, y-coords) behind a
2-entry table; network checkpoints store a u64-length-prefixed JSON
manifest followed by one block per parameter tensor.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MMF1"
VERSION = 1


def write_block(fh: BinaryIO, array: np.ndarray) -> None:
    """Append one MMF1 block holding `array` (converted to float64)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_block(fh: BinaryIO) -> np.ndarray:
    """Read one MMF1 block at the current file position."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad MMF1 magic: {magic!r}")
    version, rank = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported MMF1 version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated MMF1 payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_array(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_block(fh, array)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_block(fh)


def save_arrays(path, arrays: list[np.ndarray]) -> None:
    """Write several blocks behind a u64 offset table."""
    header = 8 * len(arrays)
    offsets = []
    pos = header
    blobs = []
    import io

    for arr in arrays:
        buf = io.BytesIO()
        write_block(buf, arr)
        blob = buf.getvalue()
        offsets.append(pos)
        blobs.append(blob)
        pos += len(blob)
    with open(path, "wb") as fh:
        fh.write(struct.pack(f"<{len(arrays)}Q", *offsets))
        for blob in blobs:
            fh.write(blob)


def load_arrays(path, count: int) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        offsets = struct.unpack(f"<{count}Q", fh.read(8 * count))
        out = []
        for off in offsets:
            fh.seek(off)
            out.append(read_block(fh))
    return out


def save_checkpoint(path, manifest: dict, tensors: list[np.ndarray]) -> None:
    """Write a JSON manifest plus one MMF1 block per tensor.

    `manifest` gets an extra "offsets" key with absolute byte offsets.
    """
    import io

    blobs = []
    for arr in tensors:
        buf = io.BytesIO()
        write_block(buf, arr)
        blobs.append(buf.getvalue())
    # Two-pass: manifest length depends on the offsets it records.
    offsets = [0] * len(blobs)
    for _ in range(4):
        manifest = dict(manifest, offsets=offsets)
        text = json.dumps(manifest, sort_keys=True).encode()
        base = 8 + len(text)
        new_offsets = []
        pos = base
        for blob in blobs:
            new_offsets.append(pos)
            pos += len(blob)
        if new_offsets == offsets:
            break
        offsets = new_offsets
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as fh:
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length).decode())
        tensors = []
        for off in manifest.get("offsets", []):
            fh.seek(off)
            tensors.append(read_block(fh))
    return manifest, tensors
