"""Parameter checkpoints.

Layout::

    GCKPT 1
    <name> <d1>,<d2>,...      one line per tensor, in payload order
    END
    <float64 little-endian payload, tensors back to back>

A scalar tensor has an empty shape field (``<name> -``).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "GCKPT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named):
    """Write ``named`` (iterable of (name, array-like or Tensor)) to ``path``."""
    lines = [MAGIC]
    chunks = []
    for name, t in named:
        arr = np.asarray(getattr(t, "values", t), dtype="<f8")
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"invalid tensor name {name!r}")
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"{name} {shape}")
        chunks.append(np.ascontiguousarray(arr).tobytes())
    lines.append("END")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks))
    return path


def load_checkpoint(path):
    """Return an ordered dict name -> float64 array."""
    blob = Path(path).read_bytes()
    end = blob.find(b"\nEND\n")
    if not blob.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a {MAGIC} checkpoint")
    header = blob[:end].decode("utf-8").splitlines()[1:]
    payload = memoryview(blob)[end + len(b"\nEND\n"):]
    out, offset = {}, 0
    for line in header:
        name, shape_s = line.rsplit(" ", 1)
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {name!r}")
        out[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return out
