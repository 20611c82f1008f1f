"""Hamming-distance retrieval over ternary codes, plus ranking metrics.

Distances between ternary codes cost 1 per +1/-1 disagreement and 0.5 per
0-vs-nonzero position, i.e. ``sum(|a - b|) / 2``. This is a metric and
reduces to the usual Hamming distance on +-1 codes. Rankings sort by
distance, then by ascending item id.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .hashing import read_codes, write_codes

logger = logging.getLogger(__name__)


class RankedResult(NamedTuple):
    item_ids: np.ndarray
    distances: np.ndarray
    labels: np.ndarray


def hamming_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"code lengths differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum()) / 2


def pairwise_hamming(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """[Q, G] ternary Hamming distances."""
    q = np.asarray(queries, dtype=np.int16)
    g = np.asarray(gallery, dtype=np.int16)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"incompatible code arrays {q.shape} and {g.shape}")
    return np.abs(q[:, None, :] - g[None, :, :]).sum(-1) / 2.0


@dataclass(frozen=True)
class RetrievalIndex:
    codes: np.ndarray
    labels: np.ndarray
    item_ids: np.ndarray

    def __len__(self) -> int:
        return self.codes.shape[0]

    @property
    def code_bits(self) -> int:
        return self.codes.shape[1]

    def save(self, path: str | Path, paths: list[str] | None = None) -> None:
        """Write the code file plus a ``<path>.meta.csv`` sidecar (item_id,label,path)."""
        write_codes(path, self.codes, self.item_ids)
        with open(sidecar_path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["item_id", "label", "path"])
            for i, (iid, lab) in enumerate(zip(self.item_ids, self.labels)):
                w.writerow([int(iid), int(lab), paths[i] if paths else ""])

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        codes, ids = read_codes(path)
        labels = {}
        with open(sidecar_path(path), newline="") as f:
            for row in csv.DictReader(f):
                labels[int(row["item_id"])] = int(row["label"])
        missing = [int(i) for i in ids if int(i) not in labels]
        if missing:
            raise ValueError(f"sidecar lacks labels for item ids {missing[:5]}")
        return build_index(codes, [labels[int(i)] for i in ids], ids)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.csv")


def build_index(codes, labels, item_ids=None) -> RetrievalIndex:
    codes = np.asarray(codes, dtype=np.int8)
    if codes.ndim == 1 and codes.size == 0:
        codes = codes.reshape(0, 0)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if item_ids is None:
        item_ids = np.arange(codes.shape[0])
    item_ids = np.asarray(item_ids, dtype=np.int64).reshape(-1)
    if codes.ndim != 2 or not (codes.shape[0] == labels.shape[0] == item_ids.shape[0]):
        raise ValueError(
            f"misaligned index arrays: codes {codes.shape}, labels {labels.shape}, ids {item_ids.shape}"
        )
    if not np.isin(codes, (-1, 0, 1)).all():
        raise ValueError("index codes must be ternary")
    if np.unique(item_ids).size != item_ids.size:
        raise ValueError("item ids must be unique")
    for a in (codes, labels, item_ids):
        a.setflags(write=False)
    return RetrievalIndex(codes, labels, item_ids)


def _rank(index: RetrievalIndex, dists: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary
    return np.lexsort((index.item_ids, dists))


def query(index: RetrievalIndex, code, k: int) -> RankedResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    code = np.asarray(code).reshape(1, -1)
    if k > len(index):
        logger.info("k=%d exceeds gallery size %d; returning all items", k, len(index))
        k = len(index)
    if len(index) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RankedResult(empty, np.zeros(0), empty)
    dists = pairwise_hamming(code, index.codes)[0]
    order = _rank(index, dists)[:k]
    return RankedResult(index.item_ids[order], dists[order], index.labels[order])


def relevance_matrix(index: RetrievalIndex, query_codes, query_labels) -> np.ndarray:
    """[Q, G] booleans: relevance of each query's ranked gallery, in rank order."""
    query_codes = np.asarray(query_codes)
    query_labels = np.asarray(query_labels).reshape(-1)
    if query_codes.shape[0] == 0:
        raise ValueError("query set is empty")
    if query_codes.shape[0] != query_labels.shape[0]:
        raise ValueError("query codes and labels are misaligned")
    dists = pairwise_hamming(query_codes, index.codes)
    rel = np.empty(dists.shape, dtype=bool)
    for qi in range(dists.shape[0]):
        order = _rank(index, dists[qi])
        rel[qi] = index.labels[order] == query_labels[qi]
    absent = ~rel.any(axis=1)
    if absent.any():
        logger.warning("%d queries have no relevant gallery items; scored as 0", int(absent.sum()))
    return rel


def average_precision(rel_row: np.ndarray, cutoff: int | None = None) -> float:
    """AP over the ranking, optionally truncated to the top ``cutoff``.

    Averages precision at each relevant rank over the relevant items retrieved
    within the cutoff (all relevant items when ``cutoff`` is None).
    """
    r = rel_row if cutoff is None else rel_row[:cutoff]
    hits = np.flatnonzero(r)
    if hits.size == 0:
        return 0.0
    prec = np.arange(1, hits.size + 1) / (hits + 1)
    return float(prec.mean())


def mean_average_precision(index: RetrievalIndex, query_codes, query_labels,
                           cutoff: int | None = None) -> float:
    rel = relevance_matrix(index, query_codes, query_labels)
    return float(np.mean([average_precision(row, cutoff) for row in rel]))


def _precision_recall_at(rel: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = rel[:, :k].sum(1)
    total = rel.sum(1)
    precision = hits / k
    recall = np.divide(hits, total, out=np.zeros(len(hits)), where=total > 0)
    return precision, recall


def precision_at_k(index: RetrievalIndex, query_codes, query_labels, k: int) -> float:
    rel = relevance_matrix(index, query_codes, query_labels)
    return float(_precision_recall_at(rel, k)[0].mean())


def recall_at_k(index: RetrievalIndex, query_codes, query_labels, k: int) -> float:
    rel = relevance_matrix(index, query_codes, query_labels)
    return float(_precision_recall_at(rel, k)[1].mean())


def pr_curve(index: RetrievalIndex, query_codes, query_labels) -> list[tuple[float, float]]:
    """Query-averaged (recall, precision) at every ranking depth 1..G."""
    return _pr_points(relevance_matrix(index, query_codes, query_labels))


def _pr_points(rel: np.ndarray) -> list[tuple[float, float]]:
    cum = np.cumsum(rel, axis=1)
    depth = np.arange(1, rel.shape[1] + 1)
    total = rel.sum(1, keepdims=True)
    precision = (cum / depth).mean(0)
    recall = np.divide(cum, total, out=np.zeros(cum.shape), where=total > 0).mean(0)
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


@dataclass
class MetricsReport:
    map: float
    map_cutoff: int | None
    precision: dict[int, float]
    recall: dict[int, float]
    pr_points: list[tuple[float, float]]

    def metric_rows(self) -> list[tuple[str, str, float]]:
        rows = [("map", "" if self.map_cutoff is None else str(self.map_cutoff), self.map)]
        rows += [("precision", str(k), v) for k, v in self.precision.items()]
        rows += [("recall", str(k), v) for k, v in self.recall.items()]
        return rows

    def write(self, metrics_path: str | Path, pr_path: str | Path) -> None:
        with open(metrics_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "k", "value"])
            for name, k, v in self.metric_rows():
                w.writerow([name, k, repr(float(v))])
        with open(pr_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["depth", "recall", "precision"])
            for depth, (r, p) in enumerate(self.pr_points, start=1):
                w.writerow([depth, repr(r), repr(p)])


def evaluate_index(index: RetrievalIndex, query_codes, query_labels, k_grid=(1, 5, 10, 20),
                   map_cutoff: int | None = None) -> MetricsReport:
    """All metrics from one relevance computation."""
    rel = relevance_matrix(index, query_codes, query_labels)
    precision, recall = {}, {}
    for k in k_grid:
        p, r = _precision_recall_at(rel, int(k))
        precision[int(k)] = float(p.mean())
        recall[int(k)] = float(r.mean())
    return MetricsReport(
        map=float(np.mean([average_precision(row, map_cutoff) for row in rel])),
        map_cutoff=map_cutoff,
        precision=precision,
        recall=recall,
        pr_points=_pr_points(rel),
    )
