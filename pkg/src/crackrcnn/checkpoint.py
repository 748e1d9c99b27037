"""Single-file checkpoint container.

Layout::

    b"CRKCKPT1" | u64 LE header length | JSON header | array bytes | sha256

Each header entry records name, dtype, shape, offset and byte count; every
array is stored little-endian. The trailing digest covers everything before
it and is verified before any array is returned.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

__all__ = ["Checkpoint", "IntegrityError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"CRKCKPT1"
DIGEST_BYTES = 32


class IntegrityError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    config_digest: str = ""
    config_text: str = ""
    extra: dict = field(default_factory=dict)


def _entries(prefix, arrays, offset, chunks):
    out = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        out.append({"name": f"{prefix}/{name}", "dtype": le.dtype.str, "shape": list(arr.shape),
                    "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return out, offset


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    chunks = []
    entries, offset = _entries("params", ckpt.params, 0, chunks)
    more, _ = _entries("optim", ckpt.optimizer_state, offset, chunks)
    header = {
        "epoch": ckpt.epoch,
        "config_digest": ckpt.config_digest,
        "config_text": ckpt.config_text,
        "extra": ckpt.extra,
        "entries": entries + more,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    blob = open(path, "rb").read()
    if len(blob) < len(MAGIC) + 8 + DIGEST_BYTES or not blob.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint file")
    body, digest = blob[:-DIGEST_BYTES], blob[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, refusing to load")
    (hlen,) = struct.unpack_from("<Q", body, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    data = memoryview(body)[start + hlen :]
    params, optim = {}, {}
    for e in header["entries"]:
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        prefix, _, name = e["name"].partition("/")
        (params if prefix == "params" else optim)[name] = arr
    return Checkpoint(
        params=params,
        optimizer_state=optim,
        epoch=header["epoch"],
        config_digest=header["config_digest"],
        config_text=header.get("config_text", ""),
        extra=header.get("extra", {}),
    )
