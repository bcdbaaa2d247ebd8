"""Binary checkpoint container: metadata lines plus named float arrays.

Layout (all integers little-endian):

    8 bytes   magic "MXTCKPT1"
    u32       metadata byte length, then that many utf-8 bytes of
              "key=value" lines, one per line, sorted by key
    u32       tensor count
    per tensor:
        u16   name byte length, then the utf-8 name
        u8    dtype code (0 = float32, 1 = float64)
        u8    rank, then rank * u32 dims
        raw   C-order little-endian payload
    u32       crc32 of everything before it

Writes go to a temp file in the same directory, then os.replace, so a crash
never leaves a half-written checkpoint at the target path. Saving the dict
returned by a load reproduces the file byte for byte (dict order is preserved
for tensors; metadata is re-sorted, and was sorted on disk to begin with).
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"MXTCKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CorruptionError(ValueError):
    """Checksum or container-structure damage."""


class SchemaError(ValueError):
    """The checkpoint disagrees with what the loader needs."""


def save_checkpoint(path: str, meta: dict, tensors: dict) -> None:
    """meta: {str: str}; tensors: {str: float32/float64 ndarray}."""
    chunks = [MAGIC]
    meta_blob = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta_blob)))
    chunks.append(meta_blob)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            raise SchemaError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    body = b"".join(chunks)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str):
    """Returns (meta: dict, tensors: dict) or raises CorruptionError."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8:
        raise CorruptionError(f"{path}: truncated ({len(blob)} bytes)")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptionError(f"{path}: bad magic {blob[:8]!r}")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CorruptionError(f"{path}: checksum mismatch")

    off = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(body):
            raise CorruptionError(f"{path}: truncated at byte {off}")
        out = body[off : off + n]
        off += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(meta_len).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CorruptionError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    if off != len(body):
        raise CorruptionError(f"{path}: {len(body) - off} trailing bytes")
    return meta, tensors
