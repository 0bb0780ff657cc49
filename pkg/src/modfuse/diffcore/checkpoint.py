"""Binary parameter checkpoints.

Layout: the magic string "MODFUSE1", then one record per parameter:
u64-LE name length, UTF-8 name ("group/param"), u64-LE rank, u64-LE
dims, raw little-endian float64 values in row-major order. Records run
until EOF. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError

MAGIC = b"MODFUSE1"


def save_checkpoint(path, groups: dict[str, dict[str, "object"]]):
    """Write named parameter groups; values may be Tensors or ndarrays."""
    out = bytearray(MAGIC)
    for group_name, params in groups.items():
        for param_name, value in params.items():
            data = np.asarray(getattr(value, "data", value), dtype=np.float64)
            name = f"{group_name}/{param_name}".encode("utf-8")
            out += struct.pack("<Q", len(name))
            out += name
            out += struct.pack("<Q", data.ndim)
            for d in data.shape:
                out += struct.pack("<Q", d)
            out += np.ascontiguousarray(data).astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict[str, dict[str, np.ndarray]]:
    """Read a checkpoint back into {group: {param: float64 array}}."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ConfigurationError(f"{path}: not a MODFUSE1 checkpoint")
    groups: dict[str, dict[str, np.ndarray]] = {}
    off = len(MAGIC)
    total = len(blob)
    while off < total:
        (name_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
        if "/" not in name:
            raise ConfigurationError(f"{path}: malformed record name {name!r}")
        group_name, param_name = name.split("/", 1)
        groups.setdefault(group_name, {})[param_name] = data
    return groups
