"""Embedding matrix files.

Binary layout (little-endian)::

    4s  magic  b"PREC"
    u32 version (1)
    u32 count
    u32 dim
    f32 count*dim values, row-major

Row ids live in a sidecar ``<path>.ids``, one UTF-8 id per line, in row order.
A ``.csv`` path selects the text fallback with header ``id,v0,...,v{d-1}``.
"""
import csv
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PREC"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class EmbeddingFormatError(ValueError):
    pass


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".ids")


def _is_csv(path):
    return Path(path).suffix.lower() == ".csv"


def write_embeddings(path, ids, matrix):
    """Write ``matrix`` (count x dim) with row ids; float32 on disk."""
    ids = [str(i) for i in ids]
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise EmbeddingFormatError(
            f"matrix shape {matrix.shape} does not match {len(ids)} ids")
    for i in ids:
        if "\n" in i or "\r" in i:
            raise EmbeddingFormatError(f"id {i!r} contains a line break")
    path = Path(path)
    data = np.ascontiguousarray(matrix, dtype="<f4")
    if _is_csv(path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [f"v{j}" for j in range(data.shape[1])])
            for rid, row in zip(ids, data):
                w.writerow([rid] + [repr(float(v)) for v in row])
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for rid in ids:
            fh.write(rid + "\n")


def read_embeddings(path):
    """Return ``(ids, matrix)`` with the matrix as float32."""
    path = Path(path)
    if _is_csv(path):
        return _read_csv(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise EmbeddingFormatError(f"{path}: truncated header")
        magic, version, count, dim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise EmbeddingFormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != 4 * count * dim:
        raise EmbeddingFormatError(
            f"{path}: expected {count}x{dim} float32 values, got {len(payload)} bytes")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    side = sidecar_path(path)
    try:
        ids = side.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise EmbeddingFormatError(f"{path}: missing id sidecar {side}") from None
    if len(ids) != count:
        raise EmbeddingFormatError(f"{side}: {len(ids)} ids for {count} rows")
    return ids, matrix


def _read_csv(path):
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise EmbeddingFormatError(f"{path}: header must start with 'id'")
        dim = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim} values, got {len(row) - 1}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from None
            ids.append(row[0])
    matrix = np.asarray(rows, dtype=np.float32).reshape(len(ids), dim)
    return ids, matrix
