"""Binary checkpoint format for named parameters.

Layout: magic "P2MX", version u32, count u32, then per parameter:
name length u16 + UTF-8 name, rank u8, extents u32 each, little-endian
f32 data.  Round-trips exactly at f32.
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"P2MX"
VERSION = 1


def save_checkpoint(path, params):
    """Write {name: Tensor-or-ndarray} to path, names sorted for determinism."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = params[name]
            data = np.asarray(getattr(arr, "data", arr), dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(data).tobytes())


def load_checkpoint(path):
    """Read a checkpoint into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", raw, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            params[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return params
