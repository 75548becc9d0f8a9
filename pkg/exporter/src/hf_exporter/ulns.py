"""ULNS activation-dump writer.

Implements the interchange byte layout the diagnostics engine documents
(all little-endian):

    magic   4 bytes  b"ULNS"
    version u32      1
    lab_len u16      UTF-8 label length, then the label bytes
    source  u8       0=forget 1=retain 2=unrelated
    L       u32      layer count
    per layer:
        index u32, rows u32, cols u32, rows*cols float32 row-major

Writer only: this tool produces dumps for the engine to read, it never
interprets them.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"ULNS"
VERSION = 1
SOURCE_TAGS = {"forget": 0, "retain": 1, "unrelated": 2}


class UlnsError(ValueError):
    pass


def write_ulns(
    path: Path | str,
    label: str,
    source: str,
    layers: list[tuple[int, np.ndarray]],
) -> None:
    """Write (layer_index, activation matrix) pairs as a ULNS dump.

    Every matrix must share one row count (one row per prompt)."""
    if source not in SOURCE_TAGS:
        raise UlnsError(f"unknown source tag {source!r}; expected one of {sorted(SOURCE_TAGS)}")
    if not layers:
        raise UlnsError("dump needs at least one layer")
    rows = layers[0][1].shape[0]
    encoded = label.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<H", len(encoded)),
        encoded,
        struct.pack("<B", SOURCE_TAGS[source]),
        struct.pack("<I", len(layers)),
    ]
    for index, mat in layers:
        mat = np.ascontiguousarray(mat, dtype="<f4")
        if mat.ndim != 2:
            raise UlnsError(f"layer {index} is not a matrix")
        if mat.shape[0] != rows:
            raise UlnsError(f"layer {index} has {mat.shape[0]} rows, expected {rows}")
        parts.append(struct.pack("<III", index, mat.shape[0], mat.shape[1]))
        parts.append(mat.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
