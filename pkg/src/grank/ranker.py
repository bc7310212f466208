"""Cross-attention ranker over the long history.

The candidate is the query; the last ``long_len`` history items, each passed
through ``MLP_long``, supply keys and values.  Keys and values depend only on
the user, so they are computed once per request and reused for every
candidate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import PAD
from .errors import ConfigError, DimensionError, IntegrityError, MaskError
from .numeric import MLP, Module, Parameter, get_dtype, ops, uniform_init
from .numeric.tensor import Tensor, constant


@dataclass
class RankerConfig:
    long_len: int = 1000
    d: int = 128
    d_k: int | None = None
    mlp_hidden: list[int] | None = None
    activation: str = "gelu"

    def __post_init__(self):
        if self.long_len < 1:
            raise ConfigError("long_len must be at least 1")

    @property
    def key_width(self) -> int:
        return self.d if self.d_k is None else self.d_k

    @property
    def hidden(self) -> list[int]:
        return [self.d] if self.mlp_hidden is None else list(self.mlp_hidden)


@dataclass
class LongHistoryEncoding:
    h_long: Tensor  # (U, long_len, d)
    valid: np.ndarray  # (U, long_len)
    keys: Tensor | None = None
    values: Tensor | None = None

    @property
    def valid_length(self) -> np.ndarray:
        return self.valid.sum(axis=-1)


class Ranker(Module):
    def __init__(self, cfg: RankerConfig, rng: np.random.Generator):
        d, dk = cfg.d, cfg.key_width
        self.cfg = cfg
        self.long_mlp = MLP(d, d, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.query_mlp = MLP(d, d, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.wq = Parameter(uniform_init(rng, d, (d, dk)))
        self.wk = Parameter(uniform_init(rng, d, (d, dk)))
        self.wv = Parameter(uniform_init(rng, d, (d, d)))
        self.ca_head = MLP(d, 1, rng, hidden=cfg.hidden, activation=cfg.activation)

    def encode_long_history(self, long_items: np.ndarray, table: Parameter, long_len: int | None = None) -> LongHistoryEncoding:
        """``MLP_long`` over the last ``long_len`` ids of left-padded (U, n) histories."""
        long_len = long_len or self.cfg.long_len
        items = np.asarray(long_items, dtype=np.int64)
        if items.ndim == 1:
            items = items[None]
        if items.shape[-1] > long_len:
            items = items[:, -long_len:]
        elif items.shape[-1] < long_len:
            pad = np.full((items.shape[0], long_len - items.shape[-1]), PAD, dtype=np.int64)
            items = np.concatenate([pad, items], axis=1)
        if items.size and items.max() >= table.shape[0]:
            raise IntegrityError(f"unknown item id {int(items.max())}")
        valid = items != PAD
        h = self.long_mlp(ops.take(table, items, pad=PAD))
        keys = ops.matmul(h, self.wk)
        values = ops.matmul(h, self.wv)
        return LongHistoryEncoding(h_long=h, valid=valid, keys=keys, values=values)

    def candidate_queries(self, cand_emb: Tensor) -> Tensor:
        return ops.matmul(self.query_mlp(cand_emb), self.wq)

    def score_queries(self, q: Tensor, enc: LongHistoryEncoding) -> Tensor:
        """Scores (U, B) for query rows ``q`` (B, d_k) shared by all users, or (U, B, d_k)."""
        if q.shape[-1] != enc.keys.shape[-1]:
            raise DimensionError(f"query width {q.shape[-1]} does not match key width {enc.keys.shape[-1]}")
        if not enc.valid.any(axis=-1).all():
            raise MaskError("ranker: a user has no valid history rows to attend to")
        scores = ops.matmul(q, ops.transpose(enc.keys))  # (U, B, long_len)
        scores = ops.scale(scores, 1.0 / math.sqrt(enc.keys.shape[-1]))
        weights = ops.softmax_rows(scores, enc.valid[:, None, :])
        z = ops.matmul(weights, enc.values)
        s = self.ca_head(z)
        return ops.reshape(s, s.shape[:-1])

    def batch_score(self, cand_emb: Tensor, enc: LongHistoryEncoding) -> Tensor:
        """Score k candidates (k, d) for every encoded user; K/V are reused."""
        if cand_emb.shape[0] < 1:
            raise ValueError("batch_score needs at least one candidate")
        return self.score_queries(self.candidate_queries(cand_emb), enc)

    def cross_attention_score(self, cand_emb: Tensor, enc: LongHistoryEncoding) -> float:
        """Scalar path for a single candidate embedding (d,) and a single encoded user.

        Recomputes the projections from ``h_long`` so that it is independent
        of the cached keys/values used by :meth:`batch_score`.
        """
        x = np.asarray(getattr(cand_emb, "data", cand_emb), dtype=get_dtype()).reshape(1, -1)
        h = enc.h_long.data[0]
        valid = enc.valid[0]
        if not valid.any():
            raise MaskError("ranker: no valid history rows to attend to")
        q = (self.query_mlp(constant(x)).data @ self.wq.data)[0]
        k = h[valid] @ self.wk.data
        v = h[valid] @ self.wv.data
        logits = k @ q / math.sqrt(k.shape[-1])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        z = (w @ v)[None]
        return float(self.ca_head(constant(z)).data.reshape(-1)[0])


def loss_ca_info(scores: Tensor, positive) -> Tensor:
    """InfoNCE over ranker scores (U, B): target column vs in-batch negatives."""
    return ops.cross_entropy(scores, positive)
