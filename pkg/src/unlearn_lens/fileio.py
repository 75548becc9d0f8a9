"""Small file and environment helpers: atomic writes, canonical JSON, and
the thread cap read from UNLEARN_LENS_THREADS."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

__all__ = ["atomic_write_bytes", "atomic_write_text", "canonical_json", "thread_count"]


def atomic_write_bytes(path: Path | str, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, separators=(",", ": ")) + "\n"


def thread_count() -> int:
    """Parallelism cap from UNLEARN_LENS_THREADS (default 1)."""
    raw = os.environ.get("UNLEARN_LENS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
