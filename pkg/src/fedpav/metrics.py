"""Retrieval evaluation (CMC, mAP), communication cost, series summaries.

Evaluation follows the standard single-shot protocol: rank the gallery per
query, drop gallery entries that share both identity and camera with the
query, then read off cumulative match characteristics and average precision.
Ties in similarity resolve toward the lower gallery index.  Queries left
without any correct cross-camera match are skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass
import os

import numpy as np

from . import kernels
from .data import SampleSet
from .model import extract_features


@dataclass(frozen=True)
class EvalResult:
    """Retrieval quality of one client's model at one round (percent)."""

    round: int
    client: int
    rank1: float
    rank5: float
    rank10: float
    mean_ap: float
    n_query: int
    n_skipped: int


@dataclass(frozen=True)
class CommCost:
    """Bytes moved between server and clients over a whole run."""

    rounds: int
    payload_bytes: int
    clients_per_round: int
    total: int
    per_client_total: int


def communication_cost(rounds: int, payload_bytes: int,
                       clients_per_round: int) -> CommCost:
    """Cost of a run: one download and one upload of the payload per round.

    ``total`` counts the payload twice per round regardless of cohort size
    (the usual headline figure); ``per_client_total`` multiplies by the
    cohort for the all-links sum.
    """
    if rounds < 0 or payload_bytes < 0 or clients_per_round < 1:
        raise ValueError("rounds/payload must be >= 0, cohort >= 1")
    per_round = 2 * payload_bytes
    return CommCost(rounds, payload_bytes, clients_per_round,
                    rounds * per_round,
                    rounds * clients_per_round * per_round)


def similarity_matrix(query_feats: np.ndarray, gallery_feats: np.ndarray,
                      metric: str = "cosine") -> np.ndarray:
    """Pairwise similarity, higher = closer.

    ``cosine`` normalizes rows (zero vectors stay zero and tie with
    everything); ``euclidean`` returns negated squared distance.
    """
    if query_feats.ndim != 2 or gallery_feats.ndim != 2:
        raise ValueError("feature arrays must be 2-d")
    if query_feats.shape[1] != gallery_feats.shape[1]:
        raise ValueError("query and gallery feature widths differ")
    if metric == "cosine":
        qn = np.linalg.norm(query_feats, axis=1, keepdims=True)
        gn = np.linalg.norm(gallery_feats, axis=1, keepdims=True)
        q = query_feats / np.where(qn == 0.0, 1.0, qn)
        g = gallery_feats / np.where(gn == 0.0, 1.0, gn)
        return q @ g.T
    if metric == "euclidean":
        qq = np.sum(query_feats * query_feats, axis=1)
        gg = np.sum(gallery_feats * gallery_feats, axis=1)
        return 2.0 * (query_feats @ gallery_feats.T) - qq[:, None] - gg[None, :]
    raise ValueError(f"metric must be cosine or euclidean, got {metric!r}")


def evaluate(backbone: np.ndarray, query: SampleSet, gallery: SampleSet, *,
             metric: str = "cosine", round_index: int = 0,
             client: int = 0) -> EvalResult:
    """Score a backbone on one query/gallery protocol.

    Metrics are percentages averaged over evaluable queries only; a query is
    skipped (and counted in n_skipped) when filtering leaves it without any
    correct gallery entry.  Raises if every query is skipped.
    """
    if len(query) == 0 or len(gallery) == 0:
        raise ValueError("query and gallery must be non-empty")
    qf = extract_features(backbone, query.x)
    gf = extract_features(backbone, gallery.x)
    sim = similarity_matrix(qf, gf, metric)
    order = np.ascontiguousarray(
        np.argsort(-sim, axis=1, kind="stable"), dtype=np.int64
    )
    ap = np.zeros(len(query))
    hit_rank = np.zeros(len(query), dtype=np.int64)
    kernels.match_stats(order, query.ids, query.cams, gallery.ids,
                        gallery.cams, ap, hit_rank)
    n_valid = 0
    hits1 = hits5 = hits10 = 0
    ap_total = 0.0
    for qi in range(len(query)):
        rank = int(hit_rank[qi])
        if rank < 0:
            continue
        n_valid += 1
        hits1 += rank < 1
        hits5 += rank < 5
        hits10 += rank < 10
        ap_total += float(ap[qi])
    if n_valid == 0:
        raise ValueError("every query was skipped; nothing to evaluate")
    return EvalResult(
        round=round_index,
        client=client,
        rank1=100.0 * hits1 / n_valid,
        rank5=100.0 * hits5 / n_valid,
        rank10=100.0 * hits10 / n_valid,
        mean_ap=100.0 * ap_total / n_valid,
        n_query=len(query),
        n_skipped=len(query) - n_valid,
    )


def average_precision(relevance) -> float:
    """AP of one ranked boolean relevance list (at least one positive)."""
    flags = [bool(v) for v in relevance]
    n_rel = sum(flags)
    if n_rel == 0:
        raise ValueError("relevance list has no positive entries")
    total = 0.0
    hits = 0
    for i, flag in enumerate(flags):
        if flag:
            hits += 1
            total += hits / (i + 1)
    return total / n_rel


def best3_average(values) -> float:
    """Mean of the three largest values (all of them when fewer)."""
    arr = sorted((float(v) for v in values), reverse=True)
    if not arr:
        raise ValueError("need at least one value")
    top = arr[:3]
    return sum(top) / len(top)


def volatility(values) -> float:
    """Sample standard deviation of successive differences.

    Series shorter than three points have no spread of differences and map
    to 0.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("values must be a non-empty 1-d series")
    if arr.size < 3:
        return 0.0
    return float(np.std(np.diff(arr), ddof=1))


EVAL_COLUMNS = ("round", "client", "rank1", "rank5", "rank10", "map")


def write_eval_csv(path: str | os.PathLike, results) -> None:
    """Two-decimal CSV of evaluation rows, ordered as given."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(EVAL_COLUMNS) + "\n")
        for r in results:
            fh.write(
                f"{r.round},{r.client},{r.rank1:.2f},{r.rank5:.2f},"
                f"{r.rank10:.2f},{r.mean_ap:.2f}\n"
            )


def read_eval_csv(path: str | os.PathLike):
    """Rows of an eval CSV as dicts with numeric values."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != EVAL_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            rows.append({
                "round": int(parts[0]),
                "client": int(parts[1]),
                "rank1": float(parts[2]),
                "rank5": float(parts[3]),
                "rank10": float(parts[4]),
                "map": float(parts[5]),
            })
    return rows
