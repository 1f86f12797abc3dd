"""Flat binary container for named arrays (model checkpoints).

Layout: an 8-byte magic string, one format-version byte, then a sequence of
records, each ``u16 name length | name bytes (utf-8) | u8 rank | u32 extent
per axis | row-major float32 payload``, all little-endian. Round-trips are
bit exact for float32 data.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError

MAGIC = b"GDEPCKPT"
VERSION = 1


def save_checkpoint(records: dict, path) -> None:
    """Write name -> array records in iteration order (cast to float32)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        for name, array in records.items():
            data = np.ascontiguousarray(np.asarray(array), dtype="<f4")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise DataFormatError(f"record name too long: {name[:40]!r}...")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def _read_exact(fh, count, what, path):
    buf = fh.read(count)
    if len(buf) != count:
        raise DataFormatError(f"{path}: truncated while reading {what}")
    return buf


def load_checkpoint(path) -> dict:
    """Read records back in file order as name -> float32 array."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataFormatError(f"{path}: bad magic; not a checkpoint file")
        (version,) = struct.unpack("<B", _read_exact(fh, 1, "version", path))
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise DataFormatError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name", path).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank", path))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents", path))
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * count, f"payload of {name!r}", path)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out
