"""Versioned binary checkpoint container.

Layout: ``b"DCM3"``, format version (u32 LE), header length (u32 LE), a JSON
header (config, step counter, RNG state, tensor manifest with
name/shape/dtype/offset), then the raw little-endian tensor payloads in
manifest order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DCM3"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict = field(default_factory=dict)  # name -> ndarray, e.g. "param/head.weight"
    step: int = 0
    optimizer_t: int = 0
    rng_state: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    manifest, payloads, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        manifest.append({"name": name, "shape": list(a.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {"config": ckpt.config, "step": ckpt.step, "optimizer_t": ckpt.optimizer_t,
              "rng_state": ckpt.rng_state, "tensors": manifest}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + b"".join(payloads)


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a DCM3 checkpoint (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(buf[12:12 + hlen].decode())
    base = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(buf):
            raise CheckpointError(f"truncated payload for tensor {entry['name']!r}")
        dt = np.dtype(entry["dtype"])
        arr = np.frombuffer(buf, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(header["config"], tensors, header["step"], header["optimizer_t"], header["rng_state"])


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
