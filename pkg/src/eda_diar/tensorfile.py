"""Binary tensor files ("EDAT") used for features, labels and checkpoints.

Two layouts share the magic, distinguished by the version word:

* version 1 - a single tensor: magic ``EDAT``, u32 version, u32 dtype code,
  u32 rank, u32 dims[rank], then row-major little-endian payload.
* version 2 - a named-tensor container with a trailing JSON metadata block,
  used for model checkpoints.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ParseError

MAGIC = b"EDAT"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_KIND = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_FOR_KIND:
        raise ValueError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return _CODE_FOR_KIND[dt]


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _dtype_code(arr)
    head = struct.pack("<II", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + dims + arr.astype(_DTYPE_CODES[code], copy=False).tobytes()


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise ParseError(f"{self.path}: truncated EDAT file")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        code = self.u32()
        if code not in _DTYPE_CODES:
            raise ParseError(f"{self.path}: unknown dtype code {code}")
        rank = self.u32()
        dims = [self.u32() for _ in range(rank)]
        dt = _DTYPE_CODES[code]
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(self.take(n * dt.itemsize), dtype=dt)
        return data.reshape(dims).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    """Write a single tensor (version-1 layout)."""
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<I", 1) + _pack_tensor(np.asarray(arr)))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    rd = _open(buf, str(path))
    version = rd.u32()
    if version != 1:
        raise ParseError(f"{path}: expected single-tensor layout (version 1), got {version}")
    return rd.tensor()


def write_container(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    """Write a named-tensor container with JSON metadata (version-2 layout)."""
    parts = [MAGIC, struct.pack("<II", 2, len(tensors))]
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(_pack_tensor(np.asarray(tensors[name])))
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        buf = f.read()
    rd = _open(buf, str(path))
    version = rd.u32()
    if version != 2:
        raise ParseError(f"{path}: expected container layout (version 2), got {version}")
    n = rd.u32()
    tensors = {}
    for _ in range(n):
        name = rd.take(rd.u32()).decode("utf-8")
        tensors[name] = rd.tensor()
    meta = json.loads(rd.take(rd.u32()).decode("utf-8"))
    return tensors, meta


def _open(buf: bytes, path: str) -> _Reader:
    rd = _Reader(buf, path)
    if rd.take(4) != MAGIC:
        raise ParseError(f"{path}: not an EDAT file (bad magic)")
    return rd
