"""Recall@K and NDCG@K for one held-out target per user."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


def _ids(result) -> np.ndarray:
    return np.asarray(getattr(result, "ids", result))


def _rank(ids: np.ndarray, target: int, k: int) -> int | None:
    if k < 1 or k > ids.size:
        raise ValueError(f"K={k} exceeds result length {ids.size}")
    hit = np.nonzero(ids[:k] == target)[0]
    return int(hit[0]) + 1 if hit.size else None


def recall_at_k(result, target: int, k: int) -> int:
    """1 if ``target`` is in the top ``k`` of ``result`` else 0."""
    return int(_rank(_ids(result), target, k) is not None)


def ndcg_at_k(result, target: int, k: int) -> float:
    """1/log2(rank+1) for the single relevant item; the ideal DCG is 1."""
    r = _rank(_ids(result), target, k)
    return 0.0 if r is None else 1.0 / math.log2(r + 1)


@dataclass
class MetricReport:
    k: int
    recall: float
    ndcg: float
    users: int
    fingerprint: str = ""
    stage: str = "final"

    def __post_init__(self):
        if not (0.0 <= self.recall <= 1.0 and 0.0 <= self.ndcg <= 1.0):
            raise ValueError("metrics must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


def metric_report(ranked: np.ndarray, targets: np.ndarray, k: int, fingerprint: str = "", stage: str = "final") -> MetricReport:
    """Vectorized mean Recall@K / NDCG@K over rows of a (users, n) id matrix."""
    ranked = np.asarray(ranked)
    targets = np.asarray(targets)
    if ranked.ndim != 2 or ranked.shape[0] != targets.size:
        raise ValueError("ranked must be (users, n) with one target per user")
    if k < 1 or k > ranked.shape[1]:
        raise ValueError(f"K={k} exceeds result length {ranked.shape[1]}")
    hits = ranked[:, :k] == targets[:, None]
    found = hits.any(axis=1)
    rank = hits.argmax(axis=1) + 1
    gains = np.where(found, 1.0 / np.log2(rank + 1), 0.0)
    n = max(targets.size, 1)
    return MetricReport(k=k, recall=float(found.sum() / n), ndcg=float(gains.sum() / n), users=int(targets.size),
                        fingerprint=fingerprint, stage=stage)
