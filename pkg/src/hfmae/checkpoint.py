"""HFMCKPT1 checkpoint format.

Layout (little-endian): magic "HFMCKPT1"; u32 manifest length; manifest
JSON (list of [name, shape, offset] with offsets relative to the data
section); raw float32 parameter buffers; trailing 8-byte FNV-1a digest of
all preceding bytes. Round trips are byte-exact.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .kernels import fnv1a64

MAGIC = b"HFMCKPT1"


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncationError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


def save_checkpoint(path, state):
    """Write a name -> float32 array mapping; returns the digest."""
    path = Path(path)
    manifest = []
    buffers = []
    offset = 0
    for name, arr in state.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append([name, list(arr.shape), offset])
        buffers.append(buf)
        offset += len(buf)
    manifest_bytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", len(manifest_bytes))
    payload += manifest_bytes
    for buf in buffers:
        payload += buf
    digest = fnv1a64(bytes(payload))
    payload += struct.pack("<Q", digest)
    path.write_bytes(bytes(payload))
    return digest


def load_checkpoint(path):
    """Read back an ordered name -> float32 array mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointTruncationError(f"checkpoint shorter than header: {len(raw)} bytes")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad magic {raw[:8]!r}; expected {MAGIC!r}")
    (mlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_end = len(MAGIC) + 4 + mlen
    if len(raw) < header_end + 8:
        raise CheckpointTruncationError("checkpoint truncated inside manifest")
    manifest = json.loads(raw[len(MAGIC) + 4 : header_end].decode("utf-8"))
    data_size = sum(
        int(np.prod(shape, dtype=np.int64)) * 4 for _, shape, _ in manifest
    )
    expected = header_end + data_size + 8
    if len(raw) < expected:
        raise CheckpointTruncationError(
            f"checkpoint truncated: {len(raw)} bytes, expected {expected}"
        )
    if len(raw) != expected:
        raise CheckpointError(f"trailing garbage: {len(raw)} bytes, expected {expected}")
    (stored,) = struct.unpack_from("<Q", raw, expected - 8)
    if fnv1a64(raw[:-8]) != stored:
        raise CheckpointDigestError("checkpoint digest mismatch (corrupted bytes)")
    state = OrderedDict()
    for name, shape, offset in manifest:
        count = int(np.prod(shape, dtype=np.int64))
        start = header_end + offset
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        state[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return state


def save_sidecar(path, config):
    """Human/tool-readable run metadata next to a checkpoint."""
    Path(str(path) + ".json").write_text(json.dumps(config, indent=2, sort_keys=True))


def load_sidecar(path):
    p = Path(str(path) + ".json")
    if not p.exists():
        return {}
    return json.loads(p.read_text())
