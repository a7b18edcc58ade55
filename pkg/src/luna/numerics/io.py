"""Binary tensor container.

Layout of one tensor (all integers little-endian)::

    b"LUNA1" | u8 dtype code | u8 rank | rank x u64 extents | raw values

Bundles (checkpoints) are a sequence of records ``u32 name length | utf-8 name
| tensor``, preceded by ``b"LUNAB"`` and a u32 record count.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"LUNA1"
BUNDLE_MAGIC = b"LUNAB"
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    f.write(MAGIC)
    f.write(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    if f.read(5) != MAGIC:
        raise ValueError("not a LUNA1 tensor")
    code, rank = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    dt = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    buf = f.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def dumps(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_bundle(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, arr)


def load_bundle(path) -> dict[str, np.ndarray]:
    out = {}
    with open(Path(path), "rb") as f:
        if f.read(5) != BUNDLE_MAGIC:
            raise ValueError(f"{path}: not a tensor bundle")
        (count,) = struct.unpack("<I", f.read(4))
        for _ in range(count):
            (ln,) = struct.unpack("<I", f.read(4))
            name = f.read(ln).decode()
            out[name] = read_tensor(f)
    return out
