"""Raw float-tensor container (DFT1).

Layout, all little-endian:

    bytes 0..3   magic "DFT1"
    u32          rank
    u32[rank]    dims
    f32[...]     payload, row-major (C order)

One tensor per file. Checkpoints store a directory of these plus a JSON
header; see the checkpoint helpers in `trainer` and `tokenizer`.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation

MAGIC = b"DFT1"


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write `array` as a DFT1 file (converted to float32)."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a DFT1 file back into a float32 array."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContractViolation(f"not a DFT1 file: {path!r} (magic {magic!r})")
        (rank,) = struct.unpack("<I", f.read(4))
        if rank > 8:
            raise ContractViolation(f"implausible tensor rank {rank} in {path!r}")
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ContractViolation(f"truncated DFT1 payload in {path!r}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
