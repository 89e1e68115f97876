"""Binary checkpoint format.

Layout (little-endian):
  magic "MVDT", version u16,
  u32 config text length + UTF-8 bytes (the run config snapshot),
  u64 training step counter,
  u32 array count, then per array a length-prefixed record:
      u16 name length + UTF-8 name,
      u8 ndim + ndim x u32 dims,
      u64 byte offset into the data section,
      u32 crc32 of the raw bytes,
  then the raw f32 data section.

Parameter arrays appear first in canonical (model insertion) order, then
optimizer-state arrays. Checksums are verified on load; loading against a
mismatched model configuration fails before any weight is touched.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T

MAGIC = b"MVDT"
VERSION = 1


def save_checkpoint(path, config_text: str, step: int, params: dict,
                    opt_arrays: dict | None = None) -> None:
    arrays = [(name, p.data) for name, p in params.items()]
    if opt_arrays:
        arrays += [(name, a) for name, a in opt_arrays.items()]
    header = bytearray()
    header += MAGIC
    header += struct.pack("<H", VERSION)
    cfg = config_text.encode("utf-8")
    header += struct.pack("<I", len(cfg)) + cfg
    header += struct.pack("<Q", step)
    header += struct.pack("<I", len(arrays))
    payload = bytearray()
    records = bytearray()
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode("utf-8")
        records += struct.pack("<H", len(nb)) + nb
        records += struct.pack("<B", arr.ndim)
        records += struct.pack(f"<{arr.ndim}I", *arr.shape)
        records += struct.pack("<Q", len(payload))
        records += struct.pack("<I", zlib.crc32(raw))
        payload += raw
    Path(path).write_bytes(bytes(header) + bytes(records) + bytes(payload))


def load_checkpoint(path) -> tuple[str, int, dict]:
    """Returns (config text, step, {name: float32 array})."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 6
    (cfg_len,) = struct.unpack_from("<I", data, off)
    off += 4
    config_text = data[off: off + cfg_len].decode("utf-8")
    off += cfg_len
    (step,) = struct.unpack_from("<Q", data, off)
    off += 8
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    records = []
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off: off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (arr_off,) = struct.unpack_from("<Q", data, off)
        off += 8
        (crc,) = struct.unpack_from("<I", data, off)
        off += 4
        records.append((name, shape, arr_off, crc))
    base = off
    arrays = {}
    for name, shape, arr_off, crc in records:
        count = int(np.prod(shape)) if shape else 1
        raw = data[base + arr_off: base + arr_off + 4 * count]
        if zlib.crc32(raw) != crc:
            raise ValueError(f"{path}: checksum mismatch for array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return config_text, step, arrays


def restore_params(params: dict, arrays: dict) -> None:
    """Load checkpoint arrays into an initialized parameter dict, in place."""
    for name, p in params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(f"parameter {name!r}: checkpoint shape "
                             f"{arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.data.dtype)


def param_checksum(p: T.Tensor) -> int:
    return zlib.crc32(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
