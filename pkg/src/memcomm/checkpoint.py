"""Single-file checkpoints: a JSON manifest followed by a little-endian float32 blob.

Layout::

    b"MEMCKPT\\0" | u32 manifest length | manifest (UTF-8 JSON) | blob

The manifest lists every parameter (name, tag, shape, byte offset), echoes
the codec configuration and carries the SHA-256 of the blob.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .numerics import ParameterSet

MAGIC = b"MEMCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(params: ParameterSet, config: dict | None) -> tuple[bytes, bytes]:
    entries, chunks, offset = [], [], 0
    for name in params.names():
        data = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        entries.append({"name": name, "tag": params.tag(name), "shape": list(params[name].shape),
                        "dtype": "<f4", "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {"version": FORMAT_VERSION, "config": config or {}, "params": entries,
                "sha256": hashlib.sha256(blob).hexdigest()}
    return json.dumps(manifest, sort_keys=True).encode("utf-8"), blob


def checkpoint_bytes(params: ParameterSet, config: dict | None = None) -> bytes:
    head, blob = _encode(params, config)
    return MAGIC + struct.pack("<I", len(head)) + head + blob


def checkpoint_hash(params: ParameterSet, config: dict | None = None) -> str:
    return hashlib.sha256(checkpoint_bytes(params, config)).hexdigest()


def save_checkpoint(params: ParameterSet, config: dict | None, path: str | Path) -> str:
    """Write ``params`` in single precision; returns the file's SHA-256."""
    raw = checkpoint_bytes(params, config)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def parse_checkpoint(raw: bytes) -> tuple[ParameterSet, dict]:
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt manifest: {err}") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {FORMAT_VERSION}")
    blob = raw[start + n:]
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointError("integrity hash mismatch (corrupt or truncated file)")
    params = ParameterSet()
    for e in manifest["params"]:
        values = np.frombuffer(blob, "<f4", int(np.prod(e["shape"], dtype=np.int64)), e["offset"])
        params.add(e["name"], values.reshape(e["shape"]).astype(np.float64), e["tag"])
    return params, manifest["config"]


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    """Inverse of :func:`save_checkpoint`; raises CheckpointError on any damage."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return parse_checkpoint(path.read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
