"""MCFE1 checkpoint files.

Layout: magic bytes `MCFE1`, a 4-byte little-endian unsigned manifest length,
a UTF-8 JSON manifest, then the concatenated little-endian float64 tensor
payloads. The manifest lists tensor names, shapes, and byte offsets (relative
to the start of the payload block), plus the model role and a config echo.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MCFE1"
ROLES = ("classifier", "generator", "discriminator")


def save_checkpoint(path: str | Path, role: str, tensors: dict[str, np.ndarray],
                    config: dict | None = None) -> None:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    entries = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps(
        {"role": role, "tensors": entries, "config": config or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        for p in payloads:
            f.write(p)


def load_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    (mlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    mstart = len(MAGIC) + 4
    manifest = json.loads(raw[mstart : mstart + mlen].decode("utf-8"))
    base = mstart + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=base + entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return manifest["role"], tensors, manifest.get("config", {})
