"""Flat binary parameter container.

Layout: the 8-byte magic ``CPRB0001`` followed by one record per tensor until
end of file. A record is ``u64 name_len | utf-8 name | u64 rank |
rank x u64 extents | f64 payload``, all little-endian, payload row-major.
"""

import struct

import numpy as np

MAGIC = b"CPRB0001"


class CheckpointError(ValueError):
    pass


def save(path, tensors):
    """Write ``{name: array}`` in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.array(arr, dtype="<f8", order="C")  # keeps rank-0 arrays rank-0
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {buf[:8]!r}")
    out = {}
    pos = 8
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            name = buf[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointError("truncated record name")
            pos += n
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out
