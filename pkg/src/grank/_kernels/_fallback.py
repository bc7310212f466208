"""Pure numpy implementations of the scan kernels.

Ordering contract shared with the compiled module: descending score, ties
broken by ascending item id.
"""

from __future__ import annotations

import numpy as np


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")


def topk_select(scores: np.ndarray, k: int):
    """Indices and values of the k largest entries of a 1-D score array."""
    scores = np.asarray(scores)
    n = scores.shape[0]
    _check_k(k, n)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        above = np.nonzero(scores > kth)[0]
        ties = np.nonzero(scores == kth)[0][: k - above.size]
        idx = np.concatenate([above, ties])
    else:
        idx = np.arange(n)
    vals = scores[idx]
    order = np.lexsort((idx, -vals))
    return idx[order].astype(np.int64), vals[order].astype(np.float32)


def topk_dense(vectors: np.ndarray, query: np.ndarray, k: int):
    scores = vectors @ np.asarray(query, dtype=vectors.dtype)
    return topk_select(scores, k)


def dequantized_scores(codes, scale, offset, query) -> np.ndarray:
    query = np.asarray(query, dtype=np.float32)
    w = query * scale
    bias = np.float32(np.dot(query.astype(np.float64), offset.astype(np.float64)))
    return codes.astype(np.float32) @ w + bias


def topk_codes(codes: np.ndarray, scale: np.ndarray, offset: np.ndarray, query: np.ndarray, k: int):
    return topk_select(dequantized_scores(codes, scale, offset, query), k)
