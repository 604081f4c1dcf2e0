"""Second funnel stage: property-based re-ranking of retrieved candidates."""
import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .dataset import TASKS
from .fusion import predict
from .retrieval import DEFAULT_K, retrieve

log = logging.getLogger(__name__)

ZERO_GUARD = 1e-8
DEFAULT_K_FINAL = 50
EXPORT_FIELDS = ("rank", "id", "similarity", "tg_pred", "tm_pred", "eg_pred", "tapd", "relevance")


class RankingError(ValueError):
    pass


@dataclass(frozen=True)
class RankedCandidate:
    id: str
    similarity: float
    predictions: tuple  # raw units: Tg K, Tm K, Eg eV
    tapd: float
    relevance: float
    measured: tuple = (None, None, None)  # reference only, never scored


def _task_positions(properties):
    props = tuple(properties)
    if not props:
        raise RankingError("select at least one property")
    bad = [p for p in props if p not in TASKS]
    if bad:
        raise RankingError(f"unknown properties {bad}; choose from {TASKS}")
    return [TASKS.index(p) for p in props]


def tapd(candidate_preds, query_preds, properties=TASKS):
    """Total absolute percentage difference over the selected properties."""
    total = 0.0
    for k in _task_positions(properties):
        q = float(query_preds[k])
        if abs(q) <= ZERO_GUARD:
            raise RankingError(f"query prediction for {TASKS[k]} is too close to zero ({q!r})")
        total += abs((float(candidate_preds[k]) - q) / q)
    return total


def relevance(tapd_value):
    if not tapd_value >= 0:
        raise RankingError(f"TAPD must be non-negative, got {tapd_value!r}")
    return 100.0 / (tapd_value + 1.0)


def sort_key(c):
    return (-c.relevance, -c.similarity, c.id)


def recommend(index, model, dataset, query_id, k_retrieve=DEFAULT_K, k_final=DEFAULT_K_FINAL,
              properties=TASKS):
    """Retrieve by language cosine, then rank the hits by predicted-property relevance."""
    if model.stats is None:
        raise RankingError("model is untrained (no task statistics)")
    if not 1 <= k_final <= k_retrieve:
        raise RankingError(f"need 1 <= k_final <= k_retrieve, got {k_final} and {k_retrieve}")
    if query_id not in dataset:
        raise RankingError(f"unknown query id {query_id!r}")
    _task_positions(properties)

    hits = retrieve(index, query_id, k_retrieve)
    rows = [dataset.index_of(query_id)] + [dataset.index_of(h.id) for h in hits]
    preds = predict(model, dataset, np.asarray(rows))
    query_preds = preds[0]
    for k in _task_positions(properties):
        if abs(query_preds[k]) <= ZERO_GUARD:
            raise RankingError(
                f"query {query_id!r}: predicted {TASKS[k]} {float(query_preds[k])!r} is too close to zero")

    out = []
    for hit, row, p in zip(hits, rows[1:], preds[1:]):
        if not np.isfinite(p).all():
            log.warning("dropping candidate %s: non-finite prediction %s", hit.id, p)
            continue
        t = tapd(p, query_preds, properties)
        if not math.isfinite(t):
            log.warning("dropping candidate %s: TAPD overflow", hit.id)
            continue
        measured = tuple(None if math.isnan(v) else float(v) for v in dataset.labels[row])
        out.append(RankedCandidate(hit.id, hit.similarity, tuple(float(v) for v in p),
                                   t, relevance(t), measured))
    out.sort(key=sort_key)
    return out[:k_final]


def _export_rows(ranked):
    for r, c in enumerate(ranked, start=1):
        yield {"rank": r, "id": c.id, "similarity": c.similarity,
               "tg_pred": c.predictions[0], "tm_pred": c.predictions[1], "eg_pred": c.predictions[2],
               "tapd": c.tapd, "relevance": c.relevance}


def write_recommendations_csv(path, ranked):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPORT_FIELDS)
        for row in _export_rows(ranked):
            w.writerow([row["rank"], row["id"], f"{row['similarity']:.9f}",
                        *(repr(row[f]) for f in EXPORT_FIELDS[3:])])


def write_recommendations_json(path, ranked, query_id=None):
    doc = {"query": query_id, "results": list(_export_rows(ranked))}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

