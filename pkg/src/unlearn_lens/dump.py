"""ULNS activation-interchange files.

Layout (all little-endian):

    magic   4 bytes  b"ULNS"
    version u32      currently 1
    lab_len u16      UTF-8 label length, then the label bytes
    source  u8       0 = forget, 1 = retain, 2 = unrelated
    L       u32      layer count
    per layer:
        index u32, rows u32, cols u32, rows*cols float32 row-major

Every layer must share the same row count (one row per probe input), so
dumps from different model states stay row-aligned for CKA and PCA.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes

__all__ = ["DumpFormatError", "ActivationDump", "read_dump", "write_dump", "SOURCE_TAGS"]

MAGIC = b"ULNS"
VERSION = 1
SOURCE_TAGS = {"forget": 0, "retain": 1, "unrelated": 2}
_TAG_NAMES = {v: k for k, v in SOURCE_TAGS.items()}


class DumpFormatError(ValueError):
    """Dump validation failure; ``code`` identifies the kind of defect."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class ActivationDump:
    label: str
    source: str
    layers: list[tuple[int, np.ndarray]]  # (layer index, float32 matrix)
    version: int = VERSION

    def validate(self) -> None:
        if self.source not in SOURCE_TAGS:
            raise DumpFormatError("bad_source_tag", f"unknown source {self.source!r}")
        if not self.layers:
            raise DumpFormatError("empty_dump", "dump has no layers")
        rows = self.layers[0][1].shape[0]
        for index, mat in self.layers:
            if mat.ndim != 2:
                raise DumpFormatError("bad_shape", f"layer {index} is not a matrix")
            if mat.shape[0] != rows:
                raise DumpFormatError(
                    "row_count_mismatch",
                    f"layer {index} has {mat.shape[0]} rows, expected {rows}",
                )


def write_dump(dump: ActivationDump, path: Path | str) -> None:
    dump.validate()
    label = dump.label.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<H", len(label)),
        label,
        struct.pack("<B", SOURCE_TAGS[dump.source]),
        struct.pack("<I", len(dump.layers)),
    ]
    for index, mat in dump.layers:
        mat32 = np.ascontiguousarray(mat, dtype="<f4")
        parts.append(struct.pack("<III", index, mat32.shape[0], mat32.shape[1]))
        parts.append(mat32.tobytes())
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise DumpFormatError("truncated_payload", f"truncated payload while reading {what}")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_dump(path: Path | str) -> ActivationDump:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise DumpFormatError("bad_magic", f"bad magic in {path}")
    version = r.u32("version")
    if version != VERSION:
        raise DumpFormatError("bad_version", f"unsupported dump version {version}")
    label = r.take(r.u16("label length"), "label").decode("utf-8")
    tag = r.u8("source tag")
    if tag not in _TAG_NAMES:
        raise DumpFormatError("bad_source_tag", f"unknown source tag {tag}")
    layer_count = r.u32("layer count")
    if layer_count == 0:
        raise DumpFormatError("empty_dump", "dump has no layers")
    layers: list[tuple[int, np.ndarray]] = []
    rows_expected: int | None = None
    for i in range(layer_count):
        index = r.u32(f"layer {i} header")
        rows = r.u32(f"layer {index} header")
        cols = r.u32(f"layer {index} header")
        payload = r.take(rows * cols * 4, f"layer {index} payload")
        mat = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
        if rows_expected is None:
            rows_expected = rows
        elif rows != rows_expected:
            raise DumpFormatError(
                "row_count_mismatch",
                f"layer {index} has {rows} rows, expected {rows_expected}",
            )
        layers.append((index, mat))
    if r.offset != len(data):
        raise DumpFormatError("size_mismatch", f"{len(data) - r.offset} trailing bytes")
    return ActivationDump(label=label, source=_TAG_NAMES[tag], layers=layers, version=version)
