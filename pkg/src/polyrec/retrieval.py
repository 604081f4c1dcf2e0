"""Exact top-k cosine retrieval over language embeddings."""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels

DEFAULT_K = 100


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalHit:
    id: str
    similarity: float


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    """L2-normalized rows in a contiguous (N, d) float64 matrix.

    ``id_rank[i]`` is row i's position in sorted id order, used to break
    similarity ties by ascending id.
    """

    ids: tuple
    unit: np.ndarray
    norms: np.ndarray
    id_rank: np.ndarray
    _pos: dict = field(repr=False)

    def __len__(self):
        return len(self.ids)

    def position(self, rid):
        try:
            return self._pos[rid]
        except KeyError:
            raise RetrievalError(f"unknown query id {rid!r}") from None


def build_index_from(ids, matrix):
    ids = tuple(ids)
    m = np.array(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != len(ids):
        raise RetrievalError(f"matrix shape {m.shape} does not match {len(ids)} ids")
    if not np.isfinite(m).all():
        raise RetrievalError("embeddings contain non-finite values")
    norms = np.linalg.norm(m, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise RetrievalError(f"zero-norm embedding for id {ids[zero[0]]!r}")
    unit = np.ascontiguousarray(m / norms[:, None])
    rank = np.empty(len(ids), dtype=np.int64)
    rank[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
    pos = {rid: i for i, rid in enumerate(ids)}
    if len(pos) != len(ids):
        raise RetrievalError("duplicate ids in index")
    for arr in (unit, norms, rank):
        arr.flags.writeable = False
    return RetrievalIndex(ids, unit, norms, rank, pos)


def build_index(dataset):
    """Index a dataset's language embeddings."""
    if dataset.lang is None:
        raise RetrievalError("dataset has no language embeddings attached")
    return build_index_from(dataset.ids, dataset.lang)


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise RetrievalError(f"cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise RetrievalError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def similarities(index, query):
    """Cosine of every indexed row against ``query`` (an id or a raw vector)."""
    if isinstance(query, str):
        return index.unit @ index.unit[index.position(query)]
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.unit.shape[1],):
        raise RetrievalError(f"query vector has shape {q.shape}, expected ({index.unit.shape[1]},)")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise RetrievalError("query vector must be finite and nonzero")
    return index.unit @ (q / n)


def retrieve(index, query, k=DEFAULT_K):
    """Top-k hits by cosine, best first, ties by ascending id.

    An id query never returns itself.
    """
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    sims = similarities(index, query)
    exclude = index.position(query) if isinstance(query, str) else -1
    top = kernels.topk_select(sims, index.id_rank, int(k), exclude)
    return [RetrievalHit(index.ids[i], float(sims[i])) for i in top]


def write_hits_csv(path, hits):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "id", "similarity"])
        for r, h in enumerate(hits, start=1):
            w.writerow([r, h.id, f"{h.similarity:.9f}"])
