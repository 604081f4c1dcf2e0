"""Polymer records, sparse property labels, splits and label standardization."""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .embio import read_embeddings

TASKS = ("tg", "tm", "eg")
TASK_UNITS = {"tg": "K", "tm": "K", "eg": "eV"}
LANG_DIM = 600
GRAPH_DIM = 512
SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PolymerRecord:
    id: str
    smiles: str
    lang_emb: np.ndarray | None
    graph_emb: np.ndarray | None
    labels: tuple  # (tg, tm, eg), None where missing

    @property
    def mask(self):
        return tuple(v is not None for v in self.labels)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented record collection; arrays are frozen after construction.

    ``labels`` is (N, 3) with NaN at missing positions. ``lang``/``graph`` are
    (N, d) float64 matrices, or None before embeddings are attached.
    """

    ids: tuple
    smiles: tuple
    labels: np.ndarray
    lang: np.ndarray | None = None
    graph: np.ndarray | None = None
    _pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        if len(self.smiles) != n:
            raise DatasetError("ids and smiles differ in length")
        labels = np.array(self.labels, dtype=np.float64).reshape(n, len(TASKS))
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        for name in ("lang", "graph"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.array(m, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != n:
                raise DatasetError(f"{name} embeddings have shape {m.shape}, need ({n}, d)")
            m.flags.writeable = False
            object.__setattr__(self, name, m)
        pos = {}
        for i, rid in enumerate(self.ids):
            if rid in pos:
                raise DatasetError(f"duplicate id {rid!r}")
            pos[rid] = i
        object.__setattr__(self, "_pos", pos)

    def __len__(self):
        return len(self.ids)

    @property
    def mask(self):
        return ~np.isnan(self.labels)

    @property
    def has_embeddings(self):
        return self.lang is not None and self.graph is not None

    def index_of(self, rid):
        try:
            return self._pos[rid]
        except KeyError:
            raise KeyError(f"unknown id {rid!r}") from None

    def __contains__(self, rid):
        return rid in self._pos

    def record(self, i):
        labels = tuple(None if math.isnan(v) else float(v) for v in self.labels[i])
        return PolymerRecord(
            id=self.ids[i],
            smiles=self.smiles[i],
            lang_emb=None if self.lang is None else self.lang[i],
            graph_emb=None if self.graph is None else self.graph[i],
            labels=labels,
        )

    def label_counts(self, indices=None):
        mask = self.mask if indices is None else self.mask[indices]
        return tuple(int(c) for c in mask.sum(axis=0))

    def with_labels(self, labels):
        return Dataset(self.ids, self.smiles, labels, self.lang, self.graph)


def _parse_label(value, task, lineno):
    if value is None:
        return math.nan
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetError(f"line {lineno}: label {task} must be a number or null")
    value = float(value)
    if not math.isfinite(value):
        raise DatasetError(f"line {lineno}: label {task} is not finite")
    return value


def load_manifest(path):
    """Read a JSONL manifest (id, smiles, tg, tm, eg; null = missing)."""
    ids, smiles, labels = [], [], []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
                raise DatasetError(f"line {lineno}: malformed record (need string 'id')")
            rid = obj["id"]
            if rid in seen:
                raise DatasetError(f"line {lineno}: duplicate id {rid!r} (first on line {seen[rid]})")
            seen[rid] = lineno
            smi = obj.get("smiles", "")
            if not isinstance(smi, str):
                raise DatasetError(f"line {lineno}: smiles must be a string")
            ids.append(rid)
            smiles.append(smi)
            labels.append([_parse_label(obj.get(t), t, lineno) for t in TASKS])
    return Dataset(tuple(ids), tuple(smiles), np.array(labels, dtype=np.float64).reshape(-1, 3))


def write_manifest(path, dataset):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, rid in enumerate(dataset.ids):
            obj = {"id": rid, "smiles": dataset.smiles[i]}
            for t, v in zip(TASKS, dataset.labels[i]):
                obj[t] = None if math.isnan(v) else float(v)
            fh.write(json.dumps(obj) + "\n")


def _align(dataset, path, expected_dim, what):
    ids, matrix = read_embeddings(path)
    if matrix.shape[1] != expected_dim:
        raise DatasetError(
            f"{what} embeddings in {path}: dimension mismatch, expected {expected_dim}, got {matrix.shape[1]}")
    row = {}
    for r, rid in enumerate(ids):
        if rid in row:
            raise DatasetError(f"{what} embeddings in {path}: duplicate id {rid!r}")
        row[rid] = r
    order = []
    for rid in dataset.ids:
        if rid not in row:
            raise DatasetError(f"{what} embeddings in {path}: missing id {rid!r}")
        order.append(row[rid])
    out = matrix[order].astype(np.float64)
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        raise DatasetError(f"{what} embedding for id {dataset.ids[int(np.argmax(bad))]!r} has non-finite entries")
    return out


def attach_embeddings(dataset, lang_file, graph_file, lang_dim=LANG_DIM, graph_dim=GRAPH_DIM):
    """Return a copy of ``dataset`` carrying both embedding matrices, matched by id."""
    lang = _align(dataset, lang_file, lang_dim, "language")
    graph = _align(dataset, graph_file, graph_dim, "graph")
    return Dataset(dataset.ids, dataset.smiles, dataset.labels, lang, graph)


@dataclass(frozen=True, eq=False)
class SplitAssignment:
    split: np.ndarray  # per-record code, index into SPLITS
    seed: int

    def indices(self, name):
        return np.flatnonzero(self.split == SPLITS.index(name))

    def counts(self):
        return tuple(int((self.split == c).sum()) for c in range(len(SPLITS)))


def split_counts(n, ratios=(0.8, 0.1, 0.1)):
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if n < 3:
        raise DatasetError(f"need at least 3 records to split, got {n}")
    # the epsilon keeps e.g. 0.29*100 from flooring to 28
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = math.floor(ratios[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(dataset, ratios=(0.8, 0.1, 0.1), seed=0):
    n = len(dataset)
    n_train, n_val, _ = split_counts(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    split = np.full(n, 2, dtype=np.int8)
    split[perm[:n_train]] = 0
    split[perm[n_train:n_train + n_val]] = 1
    split.flags.writeable = False
    return SplitAssignment(split, seed)


def write_split_csv(path, dataset, assignment):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split"])
        for rid, code in zip(dataset.ids, assignment.split):
            w.writerow([rid, SPLITS[code]])


def read_split_csv(path, dataset, seed=-1):
    split = np.full(len(dataset), -1, dtype=np.int8)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                split[dataset.index_of(row["id"])] = SPLITS.index(row["split"])
            except (KeyError, ValueError) as exc:
                raise DatasetError(f"{path}: bad row {row} ({exc})") from None
    if (split < 0).any():
        missing = dataset.ids[int(np.argmax(split < 0))]
        raise DatasetError(f"{path}: no split for id {missing!r}")
    split.flags.writeable = False
    return SplitAssignment(split, seed)


@dataclass(frozen=True, eq=False)
class TaskStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.array(self.mean, dtype=np.float64).reshape(len(TASKS)))
        object.__setattr__(self, "std", np.array(self.std, dtype=np.float64).reshape(len(TASKS)))
        for t, s in zip(TASKS, self.std):
            if not s > STD_FLOOR:
                raise DatasetError(f"task {t}: degenerate std {s!r}")

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def compute_task_stats(dataset, assignment):
    """Per-task mean and population std over training-split labels only."""
    train = dataset.labels[assignment.indices("train")]
    mean, std = [], []
    for k, t in enumerate(TASKS):
        col = train[:, k]
        col = col[~np.isnan(col)]
        if col.size < 2:
            raise DatasetError(f"task {t}: {col.size} training labels, need at least 2")
        mu = float(col.mean())
        sd = float(np.sqrt(np.mean((col - mu) ** 2)))
        if sd <= STD_FLOOR:
            raise DatasetError(f"task {t}: degenerate task, training labels have std {sd!r}")
        mean.append(mu)
        std.append(sd)
    return TaskStats(mean, std)


def standardize(labels, stats):
    # NaN (missing) entries stay NaN
    return (np.asarray(labels, dtype=np.float64) - stats.mean) / stats.std


def destandardize(values, stats):
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


@dataclass
class SyntheticSpec:
    n_records: int
    noise_std: float
    missing_rate: tuple
    ground_truth_weights: np.ndarray  # (lang_dim + graph_dim, 3)
    seed: int = 0
    offsets: tuple = (0.0, 0.0, 0.0)
    lang_dim: int = LANG_DIM
    graph_dim: int = GRAPH_DIM

    def validate(self):
        if self.n_records <= 0:
            raise DatasetError("n_records must be positive")
        if not self.noise_std >= 0:
            raise DatasetError("noise_std must be >= 0")
        if len(self.missing_rate) != 3 or not all(0 <= r < 1 for r in self.missing_rate):
            raise DatasetError(f"missing rates must lie in [0, 1), got {self.missing_rate}")
        w = np.asarray(self.ground_truth_weights)
        if w.shape != (self.lang_dim + self.graph_dim, 3):
            raise DatasetError(
                f"ground truth weights must be ({self.lang_dim + self.graph_dim}, 3), got {w.shape}")


@dataclass(frozen=True, eq=False)
class SyntheticData:
    dataset: Dataset
    weights: np.ndarray
    clean_labels: np.ndarray  # noiseless, before masking


def generate_synthetic(spec):
    """Gaussian embeddings with linear-plus-noise labels and random missingness."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_records
    # round through float32 so the on-disk embeddings reproduce the labels' inputs
    lang = rng.standard_normal((n, spec.lang_dim)).astype(np.float32).astype(np.float64)
    graph = rng.standard_normal((n, spec.graph_dim)).astype(np.float32).astype(np.float64)
    w = np.asarray(spec.ground_truth_weights, dtype=np.float64)
    clean = np.hstack([lang, graph]) @ w + np.asarray(spec.offsets, dtype=np.float64)
    labels = clean + spec.noise_std * rng.standard_normal((n, 3))
    drop = rng.random((n, 3)) < np.asarray(spec.missing_rate)
    labels[drop] = np.nan
    width = len(str(n))
    ids = tuple(f"SYN{i:0{width}d}" for i in range(n))
    smiles = tuple("*" + "C" * (1 + i % 8) + "O*" for i in range(n))
    return SyntheticData(Dataset(ids, smiles, labels, lang, graph), w, clean)


def factor_weights(seed, shared=0.7, lang_share=0.5, lang_dim=LANG_DIM, graph_dim=GRAPH_DIM):
    """Unit-norm ground-truth columns built from one shared and three task directions.

    Column k is ``sqrt(shared) * s + sqrt(1 - shared) * d_k``; each direction puts
    ``lang_share`` of its energy on the language block, the rest on the graph block.
    """
    rng = np.random.default_rng(seed)

    def direction():
        a = rng.standard_normal(lang_dim)
        b = rng.standard_normal(graph_dim)
        return np.concatenate([a / np.linalg.norm(a) * math.sqrt(lang_share),
                               b / np.linalg.norm(b) * math.sqrt(1.0 - lang_share)])

    s = direction()
    cols = [math.sqrt(shared) * s + math.sqrt(1.0 - shared) * direction() for _ in TASKS]
    w = np.stack(cols, axis=1)
    return w / np.linalg.norm(w, axis=0)


def noise_for_r2(weights, r2):
    """Noise std giving Bayes-optimal R^2 ``r2`` for standard-normal inputs.

    Uses the mean squared column norm, exact when all columns share a norm.
    """
    if not 0 < r2 < 1:
        raise ValueError("r2 must lie in (0, 1)")
    signal = float(np.mean(np.sum(np.asarray(weights) ** 2, axis=0)))
    return math.sqrt(signal * (1.0 - r2) / r2)
