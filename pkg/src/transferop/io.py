"""File formats: TOPD matrices, CSV interchange, JSON records.

``TOPD`` layout: ``b"TOPD"``, ``uint64 rows``, ``uint64 cols``, then
``rows * cols`` little-endian float64 values in row-major order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = [
    "atomic_write_bytes",
    "atomic_write_text",
    "read_csv",
    "read_json",
    "read_matrix",
    "write_csv",
    "write_json",
    "write_matrix",
]

_TOPD = struct.Struct("<4sQQ")


def atomic_write_bytes(path, data: bytes):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def matrix_to_bytes(M) -> bytes:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise FormatError(f"TOPD stores 2-D matrices, got {M.ndim}-D")
    return _TOPD.pack(b"TOPD", *M.shape) + np.ascontiguousarray(M).astype("<f8").tobytes()


def matrix_from_bytes(buf, offset=0):
    try:
        magic, rows, cols = _TOPD.unpack_from(buf, offset)
    except struct.error as exc:
        raise FormatError("truncated TOPD header") from exc
    if magic != b"TOPD":
        raise FormatError(f"bad magic {magic!r}, expected b'TOPD'")
    offset += _TOPD.size
    n = rows * cols
    if len(buf) - offset < 8 * n:
        raise FormatError("truncated TOPD payload")
    M = np.frombuffer(buf, "<f8", n, offset).reshape(rows, cols).astype(np.float64)
    return M, offset + 8 * n


def write_matrix(path, M):
    atomic_write_bytes(path, matrix_to_bytes(M))


def read_matrix(path):
    with open(path, "rb") as fh:
        M, _ = matrix_from_bytes(fh.read())
    return M


def _fmt(v):
    # 17 significant digits round-trip any float64
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    """Write numeric rows with a header line; floats keep full precision."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path):
    """Return ``(header, values)`` with values as a float64 ``(rows, cols)`` array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise FormatError(f"{path} is empty") from exc
        rows = [[float(x) for x in row] for row in reader if row]
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, values


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"{type(o).__name__} is not JSON serializable")
