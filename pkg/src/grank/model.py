"""The full model: shared item table, generator (+ auxiliary heads) and ranker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .data import Collated, UserRecord, collate
from .generator import CandidateBatch, Generator, GeneratorOutput, loss_ntp, loss_sa_info
from .numeric import Module, Parameter, get_dtype, no_grad, ops, uniform_init
from .numeric.tensor import Tensor
from .ranker import LongHistoryEncoding, Ranker, loss_ca_info


@dataclass
class LossBreakdown:
    total: Tensor
    ntp: Tensor | None
    sa: Tensor | None
    ca: Tensor | None

    def values(self) -> dict[str, float]:
        out = {"total": self.total.item()}
        for name in ("ntp", "sa", "ca"):
            t = getattr(self, name)
            out[name] = None if t is None else t.item()
        return out


class GRankModel(Module):
    def __init__(self, cfg: Config, n_items: int, demographics_width: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.n_items = n_items
        self.demographics_width = demographics_width
        self.item_embedding = Parameter(uniform_init(rng, cfg.generator.d, (n_items, cfg.generator.d)))
        self.generator = Generator(cfg.generator, demographics_width, rng)
        self.ranker = Ranker(cfg.ranker, rng)

    def named_parameters(self, prefix: str = ""):
        self.item_embedding.name = f"{prefix}shared.item_embedding"
        yield self.item_embedding.name, self.item_embedding
        yield from self.generator.named_parameters(f"{prefix}generator.")
        yield from self.ranker.named_parameters(f"{prefix}ranker.")

    def parameter_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    # -- batching ---------------------------------------------------------
    def collate(self, users, long_len: int | None = None) -> Collated:
        return collate(
            users,
            self.cfg.generator.L,
            long_len or self.cfg.ranker.long_len,
            self.cfg.generator.behavior_window,
            self.demographics_width,
        )

    # -- training -----------------------------------------------------------
    def losses(self, col: Collated, weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
        """Joint loss on one batch; a zero weight skips that head's forward work entirely.

        Candidates are the batch targets, so user j's positive sits in column j.
        """
        lam0, lam1, lam2 = weights
        table = self.item_embedding
        positive = np.arange(len(col))
        candidates = CandidateBatch.from_targets(col.targets) if lam1 > 0 else None
        out: GeneratorOutput = self.generator(col, table, candidates, training=True)
        terms, parts = [], {"ntp": None, "sa": None, "ca": None}
        if lam0 > 0:
            h_ntp = self.generator.user_vectors(out.h_u)
            items = self.generator.item_vectors(col.targets, table)
            parts["ntp"] = loss_ntp(h_ntp, items, positive, self.cfg.generator.tau)
            terms.append(ops.scale(parts["ntp"], lam0))
        if lam1 > 0:
            parts["sa"] = loss_sa_info(self.generator.sa_scores(out.h_c), positive)
            terms.append(ops.scale(parts["sa"], lam1))
        if lam2 > 0:
            enc = self.ranker.encode_long_history(col.long_items, table)
            scores = self.ranker.batch_score(ops.take(table, col.targets), enc)
            parts["ca"] = loss_ca_info(scores, positive)
            terms.append(ops.scale(parts["ca"], lam2))
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
        return LossBreakdown(total=total, **parts)

    # -- inference ------------------------------------------------------------
    def user_vectors(self, users: list[UserRecord] | Collated) -> np.ndarray:
        """Stage-1 query vectors (U, d_top); never builds candidate tokens."""
        col = users if isinstance(users, Collated) else self.collate(users)
        with no_grad():
            out = self.generator(col, self.item_embedding, None, training=False)
            return self.generator.user_vectors(out.h_u).data

    def item_vectors(self, chunk: int = 4096) -> np.ndarray:
        """Normalized NTP vectors for the whole corpus, in id order."""
        parts = []
        with no_grad():
            for start in range(0, self.n_items, chunk):
                ids = np.arange(start, min(start + chunk, self.n_items))
                parts.append(self.generator.item_vectors(ids, self.item_embedding).data)
        if not parts:
            return np.zeros((0, self.cfg.generator.d_top), dtype=get_dtype())
        return np.concatenate(parts, axis=0)

    def encode_history(self, users, long_len: int | None = None) -> LongHistoryEncoding:
        col = users if isinstance(users, Collated) else self.collate(users, long_len)
        with no_grad():
            return self.ranker.encode_long_history(col.long_items, self.item_embedding, long_len)

    def rank_scores(self, enc: LongHistoryEncoding, candidates: np.ndarray) -> np.ndarray:
        """Ranker scores for one encoded user over candidate ids, K/V reused."""
        with no_grad():
            emb = ops.take(self.item_embedding, np.asarray(candidates, dtype=np.int64))
            return self.ranker.batch_score(emb, enc).data[0]

    def sa_rank_scores(self, user: UserRecord, candidates: np.ndarray) -> np.ndarray:
        """Auxiliary-head scores with the candidates appended as tokens (Gen+SA ablation only)."""
        col = self.collate([user])
        with no_grad():
            out = self.generator(col, self.item_embedding, CandidateBatch(candidates), training=True)
            return self.generator.sa_scores(out.h_c).data[0]

    def cast(self, dtype) -> None:
        for p in self.parameters():
            p.cast(dtype)
