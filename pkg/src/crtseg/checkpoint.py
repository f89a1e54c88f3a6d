"""Single-file checkpoint container: JSON header + raw named tensors.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the concatenated tensor payload. The header records iteration count, a
config snapshot, and per-tensor name/dtype/shape/offset so the payload can
be mapped back without pickle.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"CRTSEG\x00\x01"


def save_checkpoint(path, iteration: int, config_snapshot: dict, tensors: dict) -> Path:
    """Write named arrays plus metadata; keys order is preserved."""
    path = Path(path)
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes()
    header = json.dumps(
        {
            "format": "crtseg-checkpoint-v1",
            "iteration": int(iteration),
            "config": config_snapshot,
            "tensors": entries,
        }
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))
    return path


def load_checkpoint(path):
    """Return (iteration, config_snapshot, {name: array})."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise LoadError(f"{path} is not a checkpoint container (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    try:
        header = json.loads(blob[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: malformed header: {exc}") from exc
    payload = blob[header_start + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise LoadError(f"{path}: truncated payload for tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]
        ).copy()
    return header["iteration"], header.get("config", {}), tensors
