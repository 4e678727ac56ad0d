"""Metric streams, seed derivation, and atomic file writes shared by trainers."""

from __future__ import annotations

import json
import os
import tempfile
import zlib

import numpy as np

__all__ = ["derive_seed", "MetricWriter", "atomic_write_bytes", "dump_json_line"]


def derive_seed(seed: int, *tags) -> int:
    """Stable child seed for a named sub-stream (stage index, purpose, ...)."""
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def dump_json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


class MetricWriter:
    """Appends one JSON object per line; optionally mirrors to an in-memory list.

    In deterministic mode wall-clock fields are zeroed so reruns of the same
    config produce byte-identical files.
    """

    def __init__(self, path=None, deterministic: bool = False):
        self.path = path
        self.deterministic = deterministic
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def emit(self, **fields):
        if self.deterministic and "wall_time_s" in fields:
            fields["wall_time_s"] = 0.0
        fields = {k: (round(float(v), 10) if isinstance(v, float) else v) for k, v in fields.items()}
        self.records.append(fields)
        if self._fh:
            self._fh.write(dump_json_line(fields) + "\n")
            self._fh.flush()
        return fields

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def atomic_write_bytes(path, payload: bytes):
    """Write via temp file + rename so readers never see a partial file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
