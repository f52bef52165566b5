"""Single-file binary checkpoints.

Layout: magic "CAPSAN01", uint32 tensor count, then per tensor (sorted by
name) a length-prefixed UTF-8 name, uint32 ndim, uint32 extents, and raw
float64 little-endian values; finally a length-prefixed canonical-JSON
config block. Everything little-endian, so files are byte-identical across
runs given identical contents.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .diffcore import Tensor
from .errors import BadCheckpoint

MAGIC = b"CAPSAN01"


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, tensors: dict, config: dict) -> None:
    """Write named float64 arrays plus a config dict to ``path``.

    ``tensors`` values may be Tensors or ndarrays; insertion order is
    irrelevant (names are written sorted).
    """
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        # asarray (not ascontiguousarray) so rank-0 shapes survive round trips
        data = np.asarray(
            arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C"
        )
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    cfg = canonical_json(config).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise BadCheckpoint(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, config). Raises BadCheckpoint on any malformation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadCheckpoint(f"{path}: bad magic, not a checkpoint file")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        if ndim > 32:
            raise BadCheckpoint(f"{path}: implausible tensor rank {ndim}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64).copy()
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadCheckpoint(f"{path}: config block is not valid JSON: {exc}") from exc
    if r.pos != len(blob):
        raise BadCheckpoint(f"{path}: {len(blob) - r.pos} trailing bytes after config")
    return tensors, config
