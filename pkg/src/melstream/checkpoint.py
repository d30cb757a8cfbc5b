"""Named-array container ("MFSN") used for checkpoints and enhanced log-Mel files.

Layout (little-endian)::

    b"MFSN" | u32 version | u32 len | config (UTF-8 JSON)
    repeated until EOF:
        u32 len | name (UTF-8) | u32 rank | u64 dims[rank] | float32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MFSN"
VERSION = 1
ADAM_M_PREFIX = "__adam_m__."
ADAM_V_PREFIX = "__adam_v__."


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    config: dict
    arrays: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {k: v for k, v in self.arrays.items() if not k.startswith("__")}

    def moments(self):
        m = {k[len(ADAM_M_PREFIX):]: v for k, v in self.arrays.items() if k.startswith(ADAM_M_PREFIX)}
        v = {k[len(ADAM_V_PREFIX):]: v for k, v in self.arrays.items() if k.startswith(ADAM_V_PREFIX)}
        return m, v


def dumps(config: dict, arrays: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> Container:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an MFSN file (bad magic)")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported MFSN version {version}")
    pos = 12
    config = json.loads(blob[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    arrays = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"array {name!r} truncated")
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated MFSN file: {exc}") from exc
    return Container(config, arrays)


def save(path, config: dict, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(config, arrays))
    return path


def load(path) -> Container:
    return loads(Path(path).read_bytes())
