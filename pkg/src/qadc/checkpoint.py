"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"QADCCKPT"
    uint32        format version (currently 1)
    uint64        header length N
    N bytes       UTF-8 JSON header
    payload       concatenated tensors, each little-endian float32, row-major

The header holds ``model_config``, ``step``, an ``extra`` dict and a
``tensors`` list of ``{"name", "shape", "offset", "nbytes"}`` where
``offset`` is relative to the payload start.  Parameters are stored under
``param/<name>``; optimizer moments under ``adam_m/<name>`` and
``adam_v/<name>`` together with ``extra["optimizer_step"]``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"QADCCKPT"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    extra: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        # ascontiguousarray would promote 0-d tensors to 1-d
        arr = np.require(np.asarray(ckpt.tensors[name], dtype=_LE_F32), requirements="C")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "model_config": ckpt.model_config,
        "step": int(ckpt.step),
        "extra": ckpt.extra,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=_LE_F32).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    return Checkpoint(header["model_config"], tensors, header["step"], header.get("extra", {}))
