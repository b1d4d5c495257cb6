"""Binary checkpoint format.

Layout::

    b"DHCNETCK"                     8-byte magic
    uint64 little-endian            length of the JSON header in bytes
    JSON header (UTF-8, sorted keys, compact separators)
    float32 little-endian arrays    concatenated in parameter-table order

The header holds ``format_version``, ``config``, ``epoch``, ``metrics`` and
``params``: a list of ``{"name", "shape", "offset"}`` where ``offset`` counts
bytes from the start of the array section.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"DHCNETCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: Dict[str, np.ndarray]  # insertion-ordered
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        table, blobs, offset = [], [], 0
        for name, arr in self.params.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            table.append({"name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
        header = {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "epoch": int(self.epoch),
            "metrics": self.metrics,
            "params": table,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise ValueError(f"{source}: not a checkpoint (bad magic)")
        if len(raw) < 16:
            raise ValueError(f"{source}: truncated header")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{source}: unsupported format version {header.get('format_version')}")
        body = memoryview(raw)[16 + hlen:]
        params: Dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape: Tuple[int, ...] = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + 4 * count
            if end > len(body):
                raise ValueError(f"{source}: parameter {entry['name']} runs past end of file")
            if entry["name"] in params:
                raise ValueError(f"{source}: duplicate parameter {entry['name']}")
            params[entry["name"]] = np.frombuffer(body[start:end], dtype="<f4").reshape(shape).copy()
        return cls(header["config"], params, header["epoch"], header["metrics"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), str(path))
