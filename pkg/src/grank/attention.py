"""Causal self-attention over user tokens with candidate tokens decomposed out.

User tokens are ``[x_1 .. x_L, U]``: position i may read j <= i; padded
history positions are readable only by themselves.  Each candidate token
reads every valid user token and itself, never another candidate.  Instead
of attending over the concatenated ``(T + B)`` sequence, the candidate rows
are computed from a cross-score block ``(B x T)`` and one self-score per
candidate, joined under a single softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numeric import ops
from .numeric.tensor import Tensor


@dataclass(frozen=True)
class AttentionMask:
    """Boolean admissibility over user tokens; ``allowed[..., i, j]`` lets i read j."""

    allowed: np.ndarray  # (..., T, T)
    key_valid: np.ndarray  # (..., T) tokens that other rows may read

    @classmethod
    def causal(cls, valid: np.ndarray) -> "AttentionMask":
        """Mask for tokens whose validity flags are ``valid`` (..., T); the last token is U."""
        valid = np.asarray(valid, dtype=bool)
        t = valid.shape[-1]
        lower = np.tril(np.ones((t, t), dtype=bool))
        allowed = lower & (valid[..., None, :] | np.eye(t, dtype=bool))
        return cls(allowed=allowed, key_valid=valid)

    @property
    def size(self) -> int:
        return self.allowed.shape[-1]


def combined_mask(mask: AttentionMask, n_candidates: int) -> np.ndarray:
    """Mask over the concatenation ``[user tokens; candidates]`` (..., T+B, T+B)."""
    t = mask.size
    lead = mask.allowed.shape[:-2]
    full = np.zeros(lead + (t + n_candidates, t + n_candidates), dtype=bool)
    full[..., :t, :t] = mask.allowed
    full[..., t:, :t] = mask.key_valid[..., None, :]
    idx = np.arange(t, t + n_candidates)
    full[..., idx, idx] = True
    return full


def _split_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.permute(x, axes)


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return x
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.reshape(ops.permute(x, axes), (*lead, n, h * dh))


def decomposed_attention(x, c, wq, wk, wv, mask: AttentionMask, heads: int = 1):
    """Return ``(O_X, O_C)``; ``O_C`` is None when there are no candidates.

    ``x`` is (U, T, d) or (T, d); ``c`` is (U, B, d), (B, d) or None.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1, *x.shape))
        if c is not None and c.ndim == 2:
            c = ops.reshape(c, (1, *c.shape))
    d = x.shape[-1]
    if wq.shape[0] != d or (c is not None and c.shape[-1] != d):
        raise DimensionError(f"decomposed_attention: widths x={x.shape} c={None if c is None else c.shape} w={wq.shape}")
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    inv = 1.0 / math.sqrt(d // heads)
    allowed = mask.allowed
    key_valid = mask.key_valid
    if heads > 1:
        allowed = allowed[..., None, :, :]
        key_valid = key_valid[..., None, :]

    qx = _split_heads(ops.matmul(x, wq), heads)
    kx = _split_heads(ops.matmul(x, wk), heads)
    vx = _split_heads(ops.matmul(x, wv), heads)
    kx_t = ops.transpose(kx)
    a_x = ops.softmax_rows(ops.scale(ops.matmul(qx, kx_t), inv), allowed)
    o_x = _merge_heads(ops.matmul(a_x, vx), heads)
    if c is None or c.shape[-2] == 0:
        o_x = ops.reshape(o_x, o_x.shape[1:]) if squeeze else o_x
        return o_x, None

    qc = _split_heads(ops.matmul(c, wq), heads)
    kc = _split_heads(ops.matmul(c, wk), heads)
    vc = _split_heads(ops.matmul(c, wv), heads)
    t = x.shape[-2]
    cross = ops.scale(ops.matmul(qc, kx_t), inv)  # (.., B, T)
    self_score = ops.scale(ops.sum(ops.mul(qc, kc), axis=-1, keepdims=True), inv)  # (.., B, 1)
    logits = ops.concat([cross, self_score], axis=-1)
    cand_mask = np.concatenate(
        [np.broadcast_to(key_valid[..., None, :], cross.shape), np.ones(self_score.shape, dtype=bool)], axis=-1
    )
    weights = ops.softmax_rows(logits, cand_mask)
    o_c = ops.add(ops.matmul(weights[..., :t], vx), ops.mul(weights[..., t:], vc))
    o_c = _merge_heads(o_c, heads)
    if squeeze:
        o_x = ops.reshape(o_x, o_x.shape[1:])
        o_c = ops.reshape(o_c, o_c.shape[1:])
    return o_x, o_c


def full_attention_oracle(x, c, wq, wk, wv, mask: AttentionMask, heads: int = 1):
    """Reference: masked attention over the concatenated sequence, one user at a time.

    Plain numpy on the given arrays; used only to check the decomposition.
    """
    x = np.asarray(getattr(x, "data", x))
    wq, wk, wv = (np.asarray(getattr(w, "data", w)) for w in (wq, wk, wv))
    squeeze = x.ndim == 2
    c = None if c is None else np.asarray(getattr(c, "data", c))
    if squeeze:
        x = x[None]
        c = None if c is None else c[None]
    if c is not None and c.ndim == 2:
        c = np.broadcast_to(c, (x.shape[0],) + c.shape)
    allowed = mask.allowed if mask.allowed.ndim == 3 else np.broadcast_to(mask.allowed, (x.shape[0],) + mask.allowed.shape)
    valid = mask.key_valid if mask.key_valid.ndim == 2 else np.broadcast_to(mask.key_valid, (x.shape[0], mask.size))
    n_cand = 0 if c is None else c.shape[1]
    t, d = x.shape[1], x.shape[2]
    dh = d // heads
    out_x, out_c = [], []
    for u in range(x.shape[0]):
        seq = x[u] if c is None else np.concatenate([x[u], c[u]], axis=0)
        m = combined_mask(AttentionMask(allowed[u], valid[u]), n_cand)
        q, k, v = seq @ wq, seq @ wk, seq @ wv
        out = np.empty_like(seq)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            scores = np.where(m, scores, -np.inf)
            scores = scores - scores.max(axis=1, keepdims=True)
            p = np.exp(scores)
            p /= p.sum(axis=1, keepdims=True)
            out[:, sl] = p @ v[:, sl]
        out_x.append(out[:t])
        out_c.append(out[t:])
    o_x = np.stack(out_x)
    o_c = None if c is None else np.stack(out_c)
    if squeeze:
        o_x = o_x[0]
        o_c = None if o_c is None else o_c[0]
    return o_x, o_c
