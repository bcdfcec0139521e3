"""``dfinger-ckpt-v1`` checkpoint files.

Layout: one line of UTF-8 JSON (the manifest) terminated by ``\\n``, followed
by a single blob of little-endian IEEE-754 values.  Every tensor entry in the
manifest records ``name``, ``shape``, ``dtype`` and ``byte_offset`` into the
blob.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, CorruptCheckpoint

FORMAT = "dfinger-ckpt-v1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def param_hash(self) -> bytes:
        return param_hash(self.params)


def param_hash(params: dict[str, np.ndarray]) -> bytes:
    """8-byte identity of a parameter set (float32 values, sorted names)."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        h.update(name.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.digest()[:8]


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                        "byte_offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "metadata": ckpt.metadata,
        "tensors": entries,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return head + b"\n" + blob


def from_bytes(data: bytes) -> Checkpoint:
    nl = data.find(b"\n")
    if nl < 0:
        raise CorruptCheckpoint("checkpoint manifest is truncated")
    try:
        manifest = json.loads(data[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint manifest: {exc}") from exc
    if not isinstance(manifest, dict):
        raise CorruptCheckpoint("checkpoint manifest is not an object")
    fmt = manifest.get("format")
    if fmt != FORMAT:
        raise ConfigError(
            f"checkpoint format {fmt!r} is not {FORMAT!r}; re-export it with a "
            f"matching dfinger release or convert it to {FORMAT}"
        )
    blob = data[nl + 1:]
    try:
        if len(blob) != manifest["blob_size"]:
            raise CorruptCheckpoint(f"blob has {len(blob)} bytes, manifest says {manifest['blob_size']}")
        if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
            raise CorruptCheckpoint("checkpoint blob checksum mismatch")
        params = {}
        for e in manifest["tensors"]:
            dt = np.dtype(_DTYPES[e["dtype"]])
            count = int(np.prod(e["shape"], dtype=np.int64))
            start = e["byte_offset"]
            if count * dt.itemsize != e["nbytes"] or start + e["nbytes"] > len(blob):
                raise CorruptCheckpoint(f"tensor {e['name']} exceeds blob bounds")
            arr = np.frombuffer(blob, dtype=dt, count=count, offset=start)
            params[e["name"]] = arr.astype(dt.newbyteorder("=")).reshape(e["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint manifest: {exc}") from exc
    return Checkpoint(params, manifest.get("metadata", {}))


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
