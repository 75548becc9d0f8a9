"""TLMC model checkpoints.

Byte layout (all little-endian):

    magic   4 bytes  b"TLMC"
    version u32      currently 1
    cfg_len u32      length of the UTF-8 JSON config block
    config  cfg_len  JSON: context_len, vocab_size, embed_dim,
                     hidden_widths, seed
    params  float64  every parameter tensor, row-major, in declaration
                     order: embed, (w_i, b_i) per hidden layer, w_out, b_out

Round-trips are exact: parameters are stored at full float64 precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes
from .model import TinyLM, init_model, param_order

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"TLMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: TinyLM, path: Path | str) -> None:
    config = {
        "context_len": model.context_len,
        "vocab_size": model.vocab_size,
        "embed_dim": model.embed_dim,
        "hidden_widths": list(model.hidden_widths),
        "seed": model.seed,
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name in param_order(model):
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: Path | str) -> TinyLM:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, cfg_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = json.loads(data[12 : 12 + cfg_len].decode("utf-8"))
    model = init_model(
        vocab_size=config["vocab_size"],
        context_len=config["context_len"],
        embed_dim=config["embed_dim"],
        hidden_widths=tuple(config["hidden_widths"]),
        seed=config["seed"],
    )
    offset = 12 + cfg_len
    for name in param_order(model):
        shape = model.params[name].shape
        size = int(np.prod(shape)) * 8
        chunk = data[offset : offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"truncated parameter block {name!r} in {path}")
        model.params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(data):
        raise CheckpointError(f"trailing bytes in {path}")
    return model
