"""Matrix file formats and atomic file writes.

``SCMX1``: magic, u32 rows, u32 cols, row-major float64 little-endian.
``SCLB1``: magic, u32 rows, u32 dim, row-major float32 little-endian
(externally computed embeddings). Both families also accept headerless CSV.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core_math import normalize_rows
from .errors import BadMagic, ParseError

MATRIX_MAGIC = b"SCMX1"
EMBED_MAGIC = b"SCLB1"
_HEADER = struct.Struct("<5sII")


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _decode(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"offset {exc.start}: not UTF-8 text and no recognised magic") from None


def parse_csv(text: str) -> np.ndarray:
    rows = []
    width = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            vals = [float(cell) for cell in row]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: non-numeric value ({exc})") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ParseError(f"line {lineno}: row has {len(vals)} columns, expected {width}")
        rows.append(vals)
    if not rows:
        raise ParseError("line 1: no data rows")
    return np.array(rows, dtype=np.float64)


def format_csv(m: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.atleast_2d(m))


def _pack(magic: bytes, m: np.ndarray, dtype: str) -> bytes:
    m = np.atleast_2d(m)
    return _HEADER.pack(magic, m.shape[0], m.shape[1]) + np.ascontiguousarray(m, dtype=dtype).tobytes()


def _unpack(data: bytes, magic: bytes, dtype: str) -> np.ndarray:
    if len(data) < _HEADER.size or data[:5] != magic:
        raise BadMagic(f"expected {magic!r} header")
    _, rows, cols = _HEADER.unpack_from(data)
    itemsize = np.dtype(dtype).itemsize
    need = _HEADER.size + rows * cols * itemsize
    if len(data) != need:
        raise ParseError(
            f"offset {_HEADER.size}: payload is {len(data) - _HEADER.size} bytes, "
            f"expected {need - _HEADER.size} for {rows}x{cols}"
        )
    return np.frombuffer(data, dtype=dtype, offset=_HEADER.size).astype(np.float64).reshape(rows, cols)


def matrix_to_bytes(m) -> bytes:
    return _pack(MATRIX_MAGIC, np.asarray(m, dtype=np.float64), "<f8")


def matrix_from_bytes(data: bytes) -> np.ndarray:
    return _unpack(data, MATRIX_MAGIC, "<f8")


def embeddings_to_bytes(m) -> bytes:
    return _pack(EMBED_MAGIC, np.asarray(m), "<f4")


def _is_binary(path: Path, data: bytes, magic: bytes) -> bool:
    if path.suffix.lower() == ".csv":
        return False
    return data[:5] == magic or path.suffix.lower() not in (".txt", "")


def read_matrix(path) -> np.ndarray:
    """Load a cost/plan matrix from SCMX1 or CSV."""
    path = Path(path)
    data = path.read_bytes()
    if _is_binary(path, data, MATRIX_MAGIC):
        return matrix_from_bytes(data)
    return parse_csv(_decode(data))


def write_matrix(path, m) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        atomic_write(path, format_csv(m).encode())
    else:
        atomic_write(path, matrix_to_bytes(m))


def read_embeddings(path) -> np.ndarray:
    """Load SCLB1 or CSV embeddings and re-normalize every row."""
    path = Path(path)
    data = path.read_bytes()
    if _is_binary(path, data, EMBED_MAGIC):
        raw = _unpack(data, EMBED_MAGIC, "<f4")
    else:
        raw = parse_csv(_decode(data))
    return normalize_rows(raw)


def write_embeddings(path, m) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        atomic_write(path, format_csv(m).encode())
    else:
        atomic_write(path, embeddings_to_bytes(m))
