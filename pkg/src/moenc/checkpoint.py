"""Versioned binary checkpoints.

Layout::

    b"MOENCCKP"                 8-byte magic
    version                     uint32, little endian
    header_len                  uint64, little endian
    header                      UTF-8 JSON (sorted keys): names, shapes, config, step, payload digest
    payload                     every tensor as little-endian float64, in header order

Every float64 bit pattern survives a round trip, and save -> load -> save
produces identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from moenc.errors import IncompatibleCheckpointError, IntegrityError

MAGIC = b"MOENCCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    version: int = FORMAT_VERSION


def encode(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.arrays)
    chunks = [np.ascontiguousarray(ckpt.arrays[n], dtype="<f8").tobytes() for n in names]
    payload = b"".join(chunks)
    header = {
        "version": ckpt.version,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "tensors": [{"name": n, "shape": list(np.shape(ckpt.arrays[n]))} for n in names],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, ckpt.version, len(head)) + head + payload


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise IntegrityError(f"{source}: truncated before header ({len(blob)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{source}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{source}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )
    start = _PREFIX.size
    if len(blob) < start + head_len:
        raise IntegrityError(f"{source}: truncated inside header")
    try:
        header = json.loads(blob[start:start + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{source}: corrupt header ({exc})") from None
    payload = blob[start + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(
            f"{source}: payload is {len(payload)} bytes, header promises {header['payload_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{source}: payload checksum mismatch")

    arrays, offset = {}, 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[t["name"]] = flat.astype(np.float64).reshape(t["shape"])
        offset += 8 * count
    if offset != len(payload):
        raise IntegrityError(f"{source}: tensor table does not cover the payload")
    return Checkpoint(arrays, header["config"], header["step"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a new file; refuses to clobber an existing one."""
    with open(path, "xb") as fh:
        fh.write(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))


def check_compatible(ckpt: Checkpoint, expected: dict[str, np.ndarray]) -> None:
    """Shape guard: names and shapes must match ``expected`` exactly."""
    for name in sorted(set(expected) & set(ckpt.arrays)):
        got, want = ckpt.arrays[name].shape, np.shape(expected[name])
        if got != want:
            raise IncompatibleCheckpointError(
                f"tensor {name}: checkpoint shape {got} does not fit configured shape {want}"
            )
    missing = sorted(set(expected) - set(ckpt.arrays))
    extra = sorted(set(ckpt.arrays) - set(expected))
    if missing or extra:
        raise IncompatibleCheckpointError(
            f"checkpoint tensors do not fit the configured model shape: missing {missing}, unexpected {extra}"
        )
