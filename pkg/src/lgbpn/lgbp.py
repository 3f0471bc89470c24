"""The "LGBP" binary tensor format and the named-tensor container built on it.

Single tensor::

    b"LGBP" | version u8 (1) | dtype u8 | rank u8 | pad u8 (0) | rank x u32 LE extents | payload LE

dtype 0x00 is float32 (the only type the network stores); 0x01 float64 is
accepted for verification fixtures.

Container (checkpoints, correlation maps)::

    b"LGBP" | version | 0xFF | 0 | 0 | u32 count | count x (u32 len, utf-8 name)
    | count x single-tensor record | u32 len, utf-8 text block
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"LGBP"
VERSION = 1
CONTAINER = 0xFF
_DTYPES = {0x00: np.dtype("<f4"), 0x01: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0x00, np.dtype("float64"): 0x01}


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise FormatError("rank too large")
    f.write(MAGIC + bytes([VERSION, code, arr.ndim, 0]))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated LGBP stream")
    return b


def _read_header(f: BinaryIO) -> tuple[int, int]:
    head = _read_exact(f, 8)
    if head[:4] != MAGIC:
        raise FormatError("bad magic, not an LGBP file")
    if head[4] != VERSION:
        raise FormatError(f"unsupported LGBP version {head[4]}")
    return head[5], head[6]


def read_tensor(f: BinaryIO) -> np.ndarray:
    code, rank = _read_header(f)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code:#x}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def write_container(f: BinaryIO, tensors: dict[str, np.ndarray], text: str = "") -> None:
    f.write(MAGIC + bytes([VERSION, CONTAINER, 0, 0]))
    names = list(tensors)
    f.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)) + raw)
    for name in names:
        write_tensor(f, tensors[name])
    raw = text.encode("utf-8")
    f.write(struct.pack("<I", len(raw)) + raw)


def read_container(f: BinaryIO) -> tuple[dict[str, np.ndarray], str]:
    code, _ = _read_header(f)
    if code != CONTAINER:
        raise FormatError("not an LGBP container")
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    names = []
    for _ in range(n):
        (ln,) = struct.unpack("<I", _read_exact(f, 4))
        names.append(_read_exact(f, ln).decode("utf-8"))
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in container")
    tensors = {name: read_tensor(f) for name in names}
    (ln,) = struct.unpack("<I", _read_exact(f, 4))
    text = _read_exact(f, ln).decode("utf-8")
    return tensors, text


def save_container(path: str | Path, tensors: dict[str, np.ndarray], text: str = "") -> None:
    buf = io.BytesIO()
    write_container(buf, tensors, text)
    Path(path).write_bytes(buf.getvalue())


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        return read_container(f)


def is_container(path: str | Path) -> bool:
    with open(path, "rb") as f:
        head = f.read(8)
    return len(head) == 8 and head[:4] == MAGIC and head[5] == CONTAINER
