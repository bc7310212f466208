"""Offline evaluation of the cascade on held-out targets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ServingConfig
from .data import UserRecord
from .errors import ConfigError, MaskError
from .metrics import MetricReport, metric_report
from .mips import IndexedCorpus
from .numeric import no_grad
from .numeric.tensor import constant
from .serving import Retriever


@dataclass
class EvalResult:
    stage1: dict[int, MetricReport]
    final: dict[int, MetricReport]
    users: int
    contained: int  # requests whose final ids are a subset of their stage-1 ids
    fallbacks: int = 0
    stage1_ids: np.ndarray | None = field(default=None, repr=False)
    final_ids: np.ndarray | None = field(default=None, repr=False)

    def rows(self) -> list[dict]:
        out = []
        for stage, reports in (("stage1", self.stage1), ("final", self.final)):
            for k, r in sorted(reports.items()):
                out.append({"stage": stage, "k": k, "recall": r.recall, "ndcg": r.ndcg, "users": r.users})
        return out


def stage1_batch(retriever: Retriever, users: list[UserRecord], k1: int, chunk: int = 128):
    ids = []
    for s in range(0, len(users), chunk):
        q = retriever.model.user_vectors(users[s : s + chunk])
        ids.append(retriever.index.topk_batch(q, k1, quantized=retriever.cfg.quantized)[0])
    return np.concatenate(ids, axis=0)


def rerank_batch(retriever: Retriever, users: list[UserRecord], cand: np.ndarray, k2: int, mode: str,
                 long_len: int | None = None, chunk: int = 4):
    """Stage-2 ids (U, k2) for candidate matrix ``cand`` (U, k1); same ordering rule as :meth:`Retriever.retrieve`."""
    if mode == "pure_generator":
        return cand[:, :k2], 0
    out = np.empty((len(users), k2), dtype=np.int64)
    fallbacks = 0
    queries = retriever.candidate_queries() if mode != "gen_sa" else None
    for s in range(0, len(users), chunk):
        group = users[s : s + chunk]
        c = cand[s : s + chunk]
        if mode == "gen_sa":
            scores = np.stack([retriever.model.sa_rank_scores(u, row) for u, row in zip(group, c)])
        else:
            enc = retriever.model.encode_history(group, long_len)
            has = enc.valid.any(axis=-1)
            scores = np.zeros(c.shape, dtype=np.float64)
            if has.all():
                with no_grad():
                    scores = retriever.model.ranker.score_queries(constant(queries[c]), enc).data
            else:
                for r, u in enumerate(group):
                    try:
                        scores[r] = retriever.rank(u, c[r], mode, long_len)
                    except MaskError:
                        scores[r] = -np.arange(c.shape[1])  # keep stage-1 order
                        fallbacks += 1
        for r in range(len(group)):
            order = np.lexsort((c[r], -scores[r]))[:k2]
            out[s + r] = c[r][order]
    return out, fallbacks


def evaluate(model, index: IndexedCorpus, users: list[UserRecord], cfg: ServingConfig | None = None,
             ks=(50, 500), stage1_ks=None, long_len: int | None = None, mode: str | None = None,
             k1: int | None = None, k2: int | None = None, fingerprint: str = "") -> EvalResult:
    cfg = cfg or model.cfg.serving
    retriever = Retriever(model, index, cfg)
    k1 = k1 or cfg.k1
    k2 = k2 or cfg.k2
    mode = mode or cfg.mode
    if not 1 <= k2 <= k1 <= len(index):
        raise ConfigError(f"need 1 <= k2 <= k1 <= |I|, got k1={k1} k2={k2}")
    targets = np.array([u.target for u in users], dtype=np.int64)
    cand = stage1_batch(retriever, users, k1)
    final, fallbacks = rerank_batch(retriever, users, cand, k2, mode, long_len)
    contained = sum(bool(np.isin(f, c).all()) for f, c in zip(final, cand))
    stage1_ks = stage1_ks or sorted({*ks, k1})
    s1 = {k: metric_report(cand, targets, k, fingerprint, "stage1") for k in stage1_ks if k <= k1}
    fin = {k: metric_report(final, targets, k, fingerprint, "final") for k in ks if k <= k2}
    return EvalResult(stage1=s1, final=fin, users=len(users), contained=contained, fallbacks=fallbacks,
                      stage1_ids=cand, final_ids=final)
