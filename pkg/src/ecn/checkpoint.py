"""Binary checkpoint format.

Layout::

    b"ECNCKPT\\n"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: manifest, epoch, tensor table, payload CRC32
    payload                each tensor as little-endian float32, in table order

The tensor table lists ``name``, ``group`` (param / buffer / velocity),
``shape`` and byte ``offset`` into the payload.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

__all__ = ["FORMAT_VERSION", "CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"ECNCKPT\n"
FORMAT_VERSION = 1
_GROUPS = {"param": "params", "buffer": "buffers", "velocity": "velocity"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    epoch: int
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    table = []
    chunks = []
    offset = 0
    for group, attr in _GROUPS.items():
        for name, arr in getattr(ckpt, attr).items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            table.append({"name": name, "group": group, "shape": list(np.shape(arr)), "offset": offset})
            chunks.append(data)
            offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps({
        "manifest": ckpt.manifest,
        "epoch": ckpt.epoch,
        "tensors": table,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an ECN checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if 20 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
        table = header["tensors"]
        nbytes = header["payload_bytes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = raw[20 + hlen:]
    if len(payload) != nbytes:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {nbytes} bytes)")
    if zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    groups = {g: {} for g in _GROUPS}
    for entry in table:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).astype(np.float32)
        groups[entry["group"]][entry["name"]] = arr
    return Checkpoint(header["manifest"], header["epoch"], groups["param"], groups["buffer"],
                      groups["velocity"], version)
