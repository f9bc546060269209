"""Binary PGM (P5) reading and writing, 8-bit, single channel."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a (H, W) or (1, H, W) float image in [0, 1] as 8-bit P5."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"write_pgm expects a single channel, got shape {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"write_pgm expects 2-D data, got shape {img.shape}")
    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantized.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read an 8-bit P5 file back to a (1, H, W) float image in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return (pixels.reshape(1, h, w).astype(np.float64)) / 255.0
