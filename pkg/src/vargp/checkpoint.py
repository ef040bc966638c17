"""Versioned binary checkpoints of a :class:`ContinualState`.

Layout::

    b"VARGPCK\\n"                  8-byte magic
    uint32 little-endian           format version
    uint64 little-endian           header length H
    H bytes                        UTF-8 JSON header (dims, variant, array table, meta)
    payload                        float64 little-endian arrays, in header order
    32 bytes                       SHA-256 of everything above

Floating-point payloads are stored bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .gaussian import DTYPE, DiagGaussian
from .model import ContinualState, InducingBlock

MAGIC = b"VARGPCK\n"
FORMAT_VERSION = 1
_DIGEST = 32


def _arrays(state: ContinualState):
    yield "hyper_q.mean", state.hyper_q.mean
    yield "hyper_q.log_std", state.hyper_q.log_std
    yield "hyper_prev.mean", state.hyper_prev.mean
    yield "hyper_prev.log_std", state.hyper_prev.log_std
    for t, block in enumerate(state.blocks):
        yield f"blocks.{t}.Z", block.Z
        yield f"blocks.{t}.m", block.m
        yield f"blocks.{t}.S_raw", block.S_raw


def dumps(state: ContinualState) -> bytes:
    table, chunks, offset = [], [], 0
    for name, tensor in _arrays(state):
        arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "vargp-checkpoint",
        "version": FORMAT_VERSION,
        "num_classes": state.num_classes,
        "input_dim": state.input_dim,
        "variant": state.variant,
        "num_tasks": state.num_tasks,
        "frozen": [b.frozen for b in state.blocks],
        "arrays": table,
        "payload_bytes": offset,
        "meta": state.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> ContinualState:
    if len(data) < len(MAGIC) + 12 + _DIGEST or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    version, head_len = struct.unpack("<IQ", body[len(MAGIC):len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    if len(body) < start + head_len:
        raise CheckpointError("checkpoint truncated inside the header")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    header = json.loads(body[start:start + head_len])
    payload = body[start + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("checkpoint payload length does not match its header")

    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        arrays[entry["name"]] = torch.from_numpy(arr.copy()).to(DTYPE)

    blocks = [
        InducingBlock(arrays[f"blocks.{t}.Z"], arrays[f"blocks.{t}.m"], arrays[f"blocks.{t}.S_raw"], frozen)
        for t, frozen in enumerate(header["frozen"])
    ]
    return ContinualState(
        blocks,
        DiagGaussian(arrays["hyper_q.mean"], arrays["hyper_q.log_std"]),
        DiagGaussian(arrays["hyper_prev.mean"], arrays["hyper_prev.log_std"]),
        header["num_classes"], header["input_dim"], header["variant"], header["meta"],
    )


def save(state: ContinualState, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(state))
    tmp.replace(path)
    return path


def load(path) -> ContinualState:
    return loads(Path(path).read_bytes())


def checkpoint_roundtrip(state: ContinualState) -> ContinualState:
    return loads(dumps(state))
