"""Binary checkpoint format for named tensors.

Layout (little-endian)::

    b"RFNT" | version u16 | count u32 |
    per tensor: name_len u16 | name utf-8 | rank u8 | extents u32 * rank | float32 * prod(extents)
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Dict, Mapping

import numpy as np

MAGIC = b"RFNT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump(tensors: Mapping[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load(fh: BinaryIO) -> Dict[str, np.ndarray]:
    def read(n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise CheckpointError("truncated checkpoint")
        return buf

    if read(4) != MAGIC:
        raise CheckpointError("not an RFNT checkpoint (bad magic)")
    version, count = struct.unpack("<HI", read(6))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", read(2))
        name = read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def save_file(tensors: Mapping[str, np.ndarray], path) -> None:
    with open(path, "wb") as fh:
        dump(tensors, fh)


def load_file(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load(fh)
