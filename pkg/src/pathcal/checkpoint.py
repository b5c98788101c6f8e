"""Checkpoint files: one line of JSON header, then raw little-endian float64 payload.

The header lists every array (name, shape, byte offset into the payload) in
payload order together with the dtype tag ``"f64"``, the seed, the config hash
and any free-form sections (``"backbone"``, ``"kernel"``, ...).
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

_LE_F64 = np.dtype("<f8")


def save_checkpoint(path, arrays: dict[str, np.ndarray], *, seed: int, config_hash: str,
                    sections: dict | None = None) -> str:
    """Write ``arrays`` in insertion order; returns the SHA-256 of the payload."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = {"format": "pathcal-ckpt-1", "dtype": "f64", "seed": int(seed),
              "config_hash": config_hash, "payload_sha256": digest,
              "entries": entries, "sections": sections or {}}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    os.replace(tmp, path)
    return digest


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if header.get("dtype") != "f64":
        raise ValueError(f"unsupported checkpoint dtype {header.get('dtype')!r}")
    arrays = {}
    for e in header["entries"]:
        buf = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=_LE_F64).astype(np.float64).reshape(e["shape"])
    return arrays, header


def payload_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for arr in arrays.values():
        h.update(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    return h.hexdigest()
