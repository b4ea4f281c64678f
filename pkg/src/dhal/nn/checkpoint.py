"""DHAL-CKPT-1 parameter files.

Layout::

    DHAL-CKPT-1\\n
    <manifest JSON, one line>\\n
    <little-endian float32 blob>

Parameters are concatenated in lexicographic name order. The manifest lists
``{name, shape, offset, checksum}`` per parameter (offset in bytes into the
blob, checksum = sha256 of that parameter's bytes), a checksum of the whole
blob, and a free-form ``meta`` object for model configuration.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from dhal.errors import CorruptFileError

MAGIC = "DHAL-CKPT-1"


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def encode_checkpoint(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "checksum": _sha(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"version": MAGIC, "params": entries, "blob_checksum": _sha(blob), "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return f"{MAGIC}\n{head}\n".encode() + blob


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    magic, sep, rest = data.partition(b"\n")
    if magic.decode(errors="replace") != MAGIC or not sep:
        raise CorruptFileError(f"not a {MAGIC} file")
    head, sep, blob = rest.partition(b"\n")
    try:
        manifest = json.loads(head)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"unreadable checkpoint manifest: {exc}") from None
    if _sha(blob) != manifest.get("blob_checksum"):
        raise CorruptFileError("checkpoint blob checksum mismatch")
    state = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) * 4
        raw = blob[entry["offset"] : entry["offset"] + n]
        if len(raw) != n or _sha(raw) != entry["checksum"]:
            raise CorruptFileError(f"checksum mismatch for parameter {entry['name']!r}")
        state[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return state, manifest.get("meta", {})


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write the file and return its sha256."""
    data = encode_checkpoint(state, meta)
    Path(path).write_bytes(data)
    return _sha(data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
