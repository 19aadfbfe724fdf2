"""Single-file checkpoint container.

Layout::

    b"FSECKPT\\x01" | uint64 LE header length | JSON header | payload

The header lists every tensor's name, group, shape and byte offset into the
payload, plus the config snapshot, step counter and RNG state. Payload
tensors are raw little-endian float32, so files are bit-identical across
platforms.
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import StateError

MAGIC = b"FSECKPT\x01"
FORMAT_VERSION = 1


@dataclass
class CheckpointBundle:
    params: dict[str, torch.Tensor]
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0
    rng_state: bytes = b""


def _f32_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes()


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for group, tensors in (("params", bundle.params), ("optimizer", bundle.optimizer_state)):
        for name in sorted(tensors):
            raw = _f32_bytes(tensors[name])
            entries.append(
                {"name": name, "group": group, "shape": list(tensors[name].shape), "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format": FORMAT_VERSION,
        "step": int(bundle.step),
        "config": bundle.config,
        "rng_state": base64.b64encode(bundle.rng_state).decode("ascii"),
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> CheckpointBundle:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise StateError(f"{path} is not an FSE checkpoint")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    if header.get("format") != FORMAT_VERSION:
        raise StateError(f"unsupported checkpoint format {header.get('format')}")
    payload = memoryview(data)[start + hlen :]
    groups: dict[str, dict[str, torch.Tensor]] = {"params": {}, "optimizer": {}}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise StateError(f"truncated checkpoint: tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload[e["offset"] : end], dtype="<f4").reshape(e["shape"])
        groups[e["group"]][e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return CheckpointBundle(
        params=groups["params"],
        optimizer_state=groups["optimizer"],
        config=header["config"],
        step=int(header["step"]),
        rng_state=base64.b64decode(header["rng_state"]),
    )
