"""Target-aware generator: causal decoder over recent history plus a query token.

During training the batch's target items enter as candidate tokens through
the auxiliary MLP and are carried through every layer with the decomposed
attention; at inference no candidate token exists and the user-token path is
computed by exactly the same ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMask, decomposed_attention
from .data import FEATURE_WIDTH, PAD, Collated
from .errors import ConfigError, ContractError, DimensionError, IntegrityError
from .numeric import MLP, LayerNorm, Linear, Module, Parameter, get_dtype, ops, uniform_init
from .numeric.tensor import Tensor, constant


@dataclass
class GeneratorConfig:
    d: int = 128
    L: int = 64
    N: int = 4
    heads: int = 1
    tau: float = 0.05
    d_top: int = 128
    ffn_mult: int = 4
    mlp_hidden: list[int] | None = None  # None -> one hidden layer of width d
    activation: str = "gelu"
    behavior_window: int | None = 256

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if min(self.d, self.L, self.d_top) < 1 or self.N < 0:
            raise ConfigError("generator sizes must be positive")

    @property
    def hidden(self) -> list[int]:
        return [self.d] if self.mlp_hidden is None else list(self.mlp_hidden)


@dataclass
class CandidateBatch:
    """Candidate items appended during training; row j belongs to batch user ``provenance[j]``."""

    items: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.provenance is None:
            self.provenance = np.arange(self.items.size)

    def __len__(self):
        return int(self.items.size)

    @classmethod
    def from_targets(cls, targets) -> "CandidateBatch":
        return cls(np.asarray(targets, dtype=np.int64))


@dataclass
class GeneratorOutput:
    h_u: Tensor  # (U, d)
    h_c: Tensor | None  # (U, B, d)
    x_out: Tensor  # (U, T, d) final user-token states


class DecoderBlock(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        d = cfg.d
        self.ln1 = LayerNorm(d)
        self.wq = Parameter(uniform_init(rng, d, (d, d)))
        self.wk = Parameter(uniform_init(rng, d, (d, d)))
        self.wv = Parameter(uniform_init(rng, d, (d, d)))
        self.wo = Parameter(uniform_init(rng, d, (d, d)))
        self.ln2 = LayerNorm(d)
        self.ffn = MLP(d, d, rng, hidden=[cfg.ffn_mult * d], activation="gelu")
        self.heads = cfg.heads

    def __call__(self, x: Tensor, c: Tensor | None, mask: AttentionMask):
        xn = self.ln1(x)
        cn = None if c is None else self.ln1(c)
        o_x, o_c = decomposed_attention(xn, cn, self.wq, self.wk, self.wv, mask, self.heads)
        x = ops.add(x, ops.matmul(o_x, self.wo))
        x = ops.add(x, self.ffn(self.ln2(x)))
        if c is not None:
            c = ops.add(c, ops.matmul(o_c, self.wo))
            c = ops.add(c, self.ffn(self.ln2(c)))
        return x, c


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, demographics_width: int, rng: np.random.Generator):
        d = cfg.d
        self.cfg = cfg
        self.demographics_width = demographics_width
        self.interaction_mlp = MLP(d + FEATURE_WIDTH, d, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.position = Parameter(uniform_init(rng, d, (cfg.L, d)))
        self.query_mlp = MLP(demographics_width + 3 * d, d, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.aux_mlp = MLP(d, d, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.N)]
        self.ntp_user = Linear(d, cfg.d_top, rng)
        self.ntp_item = MLP(d, cfg.d_top, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.sa_head = MLP(d, 1, rng, hidden=cfg.hidden, activation=cfg.activation)
        self.aux_tokens_processed = 0  # serving guard reads this

    # -- inputs ---------------------------------------------------------
    def encode_interactions(self, items: np.ndarray, features: np.ndarray, table: Parameter) -> Tensor:
        """Rows ``MLP([e_t; f_t]) + position_t`` for left-padded ids (U, L); padded rows are zero."""
        items = np.asarray(items)
        if items.shape[-1] != self.cfg.L:
            raise DimensionError(f"expected {self.cfg.L} history slots, got {items.shape[-1]}")
        if items.size and items.max() >= table.shape[0]:
            raise IntegrityError(f"unknown item id {int(items.max())}")
        valid = (items != PAD)[..., None].astype(get_dtype())
        e = ops.take(table, items, pad=PAD)
        x = self.interaction_mlp(ops.concat([e, constant(features)], axis=-1))
        return ops.mul(ops.add(x, self.position), valid)

    def build_query_token(self, col: Collated, table: Parameter) -> Tensor:
        """U = MLP_query([u; sum(rs); sum(click); sum(long_view)]) with shape (U, d)."""
        n = len(col)
        pools = [ops.embedding_bag(table, *col.pool_ids[name], n) for name in ("rs", "click", "long_view")]
        demo = constant(col.demographics[:, : self.demographics_width])
        return self.query_mlp(ops.concat([demo, *pools], axis=-1))

    def candidate_tokens(self, candidates: CandidateBatch, table: Parameter) -> Tensor:
        return self.aux_mlp(ops.take(table, candidates.items))

    # -- decoder ----------------------------------------------------------
    def decode(self, x: Tensor, u: Tensor, c: Tensor | None, valid: np.ndarray) -> GeneratorOutput:
        """Run the N blocks on user tokens ``[x; U]`` and optional candidate tokens.

        ``x`` (U, L, d), ``u`` (U, d), ``c`` (B, d) shared or (U, B, d), ``valid`` (U, L).
        """
        n_users = x.shape[0]
        tokens = ops.concat([x, ops.reshape(u, (n_users, 1, u.shape[-1]))], axis=1)
        mask = AttentionMask.causal(np.concatenate([valid, np.ones((n_users, 1), dtype=bool)], axis=1))
        if c is not None and c.ndim == 2:
            c = ops.broadcast_to(c, (n_users, *c.shape))
        for block in self.blocks:
            tokens, c = block(tokens, c, mask)
        h_u = tokens[:, -1, :]
        return GeneratorOutput(h_u=h_u, h_c=c, x_out=tokens)

    def forward(
        self,
        col: Collated,
        table: Parameter,
        candidates: CandidateBatch | None = None,
        training: bool = True,
    ) -> GeneratorOutput:
        if candidates is not None and not training:
            raise ContractError("candidate tokens are training-only; inference must not receive a CandidateBatch")
        x = self.encode_interactions(col.short_items, col.short_features, table)
        u = self.build_query_token(col, table)
        c = None
        if candidates is not None and len(candidates):
            c = self.candidate_tokens(candidates, table)
            self.aux_tokens_processed += len(candidates) * len(col)
        return self.decode(x, u, c, col.short_valid)

    __call__ = forward

    # -- heads ----------------------------------------------------------------
    def user_vectors(self, h_u: Tensor) -> Tensor:
        """Unit-norm NTP query vectors (U, d_top)."""
        return ops.l2_normalize(self.ntp_user(h_u))

    def item_vectors(self, items, table: Parameter) -> Tensor:
        """Unit-norm NTP item vectors for the MIPS space (n, d_top)."""
        return ops.l2_normalize(self.ntp_item(ops.take(table, np.asarray(items, dtype=np.int64))))

    def sa_scores(self, h_c: Tensor) -> Tensor:
        s = self.sa_head(h_c)
        return ops.reshape(s, s.shape[:-1])


def info_nce(logits: Tensor, positive) -> Tensor:
    """Mean of ``-log softmax(logits)[positive]``: the positive sits in its own denominator."""
    return ops.cross_entropy(logits, positive)


def loss_ntp(h_ntp: Tensor, item_vecs: Tensor, positive, tau: float) -> Tensor:
    """InfoNCE between query vectors (U, d_top) and candidate item vectors (B, d_top)."""
    logits = ops.scale(ops.matmul(h_ntp, ops.transpose(item_vecs)), 1.0 / tau)
    return info_nce(logits, positive)


def loss_sa_info(sa_scores: Tensor, positive) -> Tensor:
    """InfoNCE over auxiliary candidate scores (U, B); no temperature."""
    return info_nce(sa_scores, positive)
