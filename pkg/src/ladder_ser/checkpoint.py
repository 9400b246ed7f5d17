"""Binary checkpoint persistence.

Layout (all integers little-endian)::

    magic      8 bytes  b"LADRCKPT"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (sorted keys): config, meta, manifest
    payload    tensors back to back, each in the dtype its manifest entry names
               ("<f4" for parameters, buffers and optimizer moments, "<f8" for
               normalization statistics)
    digest     32 bytes SHA-256 of everything above

Each manifest entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with the
offset relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ladder_ser.errors import CheckpointError

MAGIC = b"LADRCKPT"
FORMAT_VERSION = 1
DIGEST_LEN = 32


@dataclass
class Checkpoint:
    config: Dict[str, object]
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_m: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_n: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_t: int = 0
    norm: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _sections(ckpt: Checkpoint):
    yield "param", ckpt.params, "<f4"
    yield "buffer", ckpt.buffers, "<f4"
    yield "opt_m", ckpt.opt_m, "<f4"
    yield "opt_n", ckpt.opt_n, "<f4"
    yield "norm", ckpt.norm, "<f8"


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for section, tensors, dtype in _sections(ckpt):
        for name in sorted(tensors):
            raw = np.ascontiguousarray(tensors[name], dtype=dtype).tobytes()
            manifest.append({
                "name": f"{section}/{name}",
                "dtype": dtype,
                "shape": list(np.shape(tensors[name])),
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    header = json.dumps(
        {"config": ckpt.config, "meta": ckpt.meta, "opt_t": ckpt.opt_t, "manifest": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    body = MAGIC + struct.pack("<II", ckpt.version, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + DIGEST_LEN or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, digest = blob[:-DIGEST_LEN], blob[-DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch: file is corrupted or truncated")
    pos = len(MAGIC)
    version, hlen = struct.unpack("<II", body[pos:pos + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos += 8
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    payload = body[pos + hlen:]
    sections = {"param": {}, "buffer": {}, "opt_m": {}, "opt_n": {}, "norm": {}}
    for entry in header["manifest"]:
        section, name = entry["name"].split("/", 1)
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"tensor {entry['name']} extends past the payload")
        arr = np.frombuffer(payload[start:start + n], dtype=entry["dtype"]).reshape(entry["shape"])
        native = np.float32 if entry["dtype"] == "<f4" else np.float64
        sections[section][name] = arr.astype(native)
    return Checkpoint(
        config=header["config"],
        params=sections["param"],
        buffers=sections["buffer"],
        opt_m=sections["opt_m"],
        opt_n=sections["opt_n"],
        opt_t=int(header["opt_t"]),
        norm=sections["norm"],
        meta=header["meta"],
        version=version,
    )


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def checkpoint_load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(blob)


def digest_of(ckpt: Checkpoint) -> str:
    return hashlib.sha256(to_bytes(ckpt)).hexdigest()


def tensor_digest(tensors: Dict[str, np.ndarray], dtype: Optional[str] = "<f4") -> str:
    """Order-independent digest of named tensors in canonical little-endian form."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype=dtype).tobytes())
    return h.hexdigest()
