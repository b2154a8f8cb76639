"""Binary container for model updates, checkpoints and dataset dumps.

Layout (all integers little-endian)::

    "FMKI"  version:u32  round:u32  client:u32  count:u32
    count x { name_len:u16  name:utf-8  rank:u8  dims:u32*rank  data:f64*prod(dims) }
    crc32:u32   # over every preceding byte

The trailing CRC is what lets a flipped payload bit be rejected; without it a
corrupted float is indistinguishable from a valid one.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .errors import (BadMagicError, ChecksumError, LayoutError, TruncatedError,
                     VersionError)

MAGIC = b"FMKI"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_CRC = struct.Struct("<I")
META_PREFIX = "__meta__."


@dataclass
class ModelUpdate:
    client_id: int
    round_index: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    sample_count: int = 0

    def encoder_part(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("enc.")}

    def decoder_part(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("dec.")}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelUpdate):
            return NotImplemented
        return (self.client_id == other.client_id and self.round_index == other.round_index
                and self.sample_count == other.sample_count
                and list(self.tensors) == list(other.tensors)
                and all(self.tensors[k].shape == other.tensors[k].shape
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes()
                        for k in self.tensors))


def encode_tensors(tensors: Mapping[str, np.ndarray], round_index: int = 0,
                   client_id: int = 0) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, round_index, client_id, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank too large for {name}")
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor {name} has an empty dimension {arr.shape}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def decode_tensors(buf: bytes):
    """Return ``(round_index, client_id, {name: array})`` or raise a ``ParseError``."""
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedError(f"message of {len(buf)} bytes ends inside the magic")
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedError("message ends inside the header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (expected {VERSION})")
    if len(buf) < _HEADER.size + _CRC.size:
        raise TruncatedError(f"message of {len(buf)} bytes is shorter than the fixed header")
    _, _, round_index, client_id, count = _HEADER.unpack_from(buf, 0)
    end = len(buf) - _CRC.size
    pos = _HEADER.size
    layout = []

    def need(n: int, what: str) -> None:
        if pos + n > end:
            raise TruncatedError(f"truncated while reading {what} at byte {pos}")

    for i in range(count):
        need(2, f"name length of tensor {i}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen, f"name of tensor {i}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise LayoutError(f"tensor {i} name is not valid UTF-8") from None
        pos += nlen
        need(1, f"rank of {name!r}")
        rank = buf[pos]
        pos += 1
        need(4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        if any(d == 0 for d in dims):
            raise LayoutError(f"tensor {name!r} declares a zero dimension {dims}")
        nbytes = 8 * math.prod(dims)    # exact; an int64 product can wrap
        need(nbytes, f"payload of {name!r} ({nbytes} bytes)")
        layout.append((name, dims, pos))
        pos += nbytes
    if pos != end:
        raise LayoutError(f"{end - pos} unexpected bytes after the last tensor")
    (crc,) = _CRC.unpack_from(buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise ChecksumError("checksum mismatch")
    tensors: Dict[str, np.ndarray] = {}
    for name, dims, off in layout:
        if name in tensors:
            raise LayoutError(f"duplicate tensor name {name!r}")
        n = math.prod(dims)
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        tensors[name] = arr.reshape(dims)
    return round_index, client_id, tensors


def serialize_update(u: ModelUpdate) -> bytes:
    tensors = dict(u.tensors)
    tensors[META_PREFIX + "sample_count"] = np.array([float(u.sample_count)])
    return encode_tensors(tensors, u.round_index, u.client_id)


def deserialize_update(buf: bytes) -> ModelUpdate:
    round_index, client_id, tensors = decode_tensors(buf)
    count = tensors.pop(META_PREFIX + "sample_count", None)
    if count is None:
        raise LayoutError("update carries no sample_count record")
    return ModelUpdate(client_id, round_index, tensors, int(count[0]))


# ---------------------------------------------------------------------- files

def atomic_write_bytes(path: str, data: bytes) -> str:
    """Write via a temp file in the same directory and rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_tensor_file(path: str, tensors: Mapping[str, np.ndarray], round_index: int = 0,
                      client_id: int = 0) -> str:
    return atomic_write_bytes(path, encode_tensors(tensors, round_index, client_id))


def read_tensor_file(path: str):
    with open(path, "rb") as f:
        return decode_tensors(f.read())
