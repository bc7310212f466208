"""Flat MIPS over item NTP vectors.

There is no tree, graph or codebook: every query is one linear scan of the
corpus with bounded top-k selection.  Results are ordered by descending
score with ties broken by ascending item id.

Index file layout (little-endian)::

    b"GIDX"  version:u32  n:u32  d:u32  rows:f32[n*d]
    version 2 appends  bits:u32  scale:f32[d]  offset:f32[d]  codes:u8[n*d]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, ParseError

MAGIC = b"GIDX"
VERSION_DENSE = 1
VERSION_QUANTIZED = 2


@dataclass
class RetrievalResult:
    ids: np.ndarray
    scores: np.ndarray
    stage: str = "stage1"
    timings: dict = field(default_factory=dict)  # microseconds per stage
    stage1: "RetrievalResult | None" = None  # the candidate set a final result was cut from
    fallback: bool = False

    def __len__(self):
        return int(self.ids.size)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    def rank_of(self, item: int) -> int | None:
        """1-based rank of ``item``, or None when absent."""
        hit = np.nonzero(self.ids == item)[0]
        return int(hit[0]) + 1 if hit.size else None


@dataclass
class QuantizedCorpus:
    """Per-dimension affine codes: ``v ~= offset + scale * code``, code in [0, 2**bits - 1]."""

    scale: np.ndarray
    offset: np.ndarray
    codes: np.ndarray
    bits: int = 8

    @property
    def d(self) -> int:
        return int(self.codes.shape[1])

    def __len__(self):
        return int(self.codes.shape[0])

    @classmethod
    def quantize(cls, vectors: np.ndarray, bits: int = 8) -> "QuantizedCorpus":
        if not 1 <= bits <= 8:
            raise ValueError("bits must be in [1, 8]")
        v = np.asarray(vectors, dtype=np.float32)
        levels = (1 << bits) - 1
        lo = v.min(axis=0)
        span = v.max(axis=0) - lo
        scale = (span / levels).astype(np.float32)
        safe = np.where(scale > 0, scale, 1.0)
        codes = np.clip(np.rint((v - lo) / safe), 0, levels)
        codes[:, scale == 0] = 0
        return cls(scale=scale, offset=lo.astype(np.float32), codes=codes.astype(np.uint8), bits=bits)

    def dequantize(self) -> np.ndarray:
        return self.offset + self.codes.astype(np.float32) * self.scale

    def topk(self, query, k: int) -> RetrievalResult:
        ids, scores = _kernels.topk_codes(self.codes, self.scale, self.offset, _query(query, self.d), k)
        return RetrievalResult(ids, scores)


@dataclass
class IndexedCorpus:
    vectors: np.ndarray  # (n, d_top) float32, row i is item i
    quantized: QuantizedCorpus | None = None

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("corpus vectors must be a matrix")

    def __len__(self):
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    def quantize(self, bits: int = 8) -> QuantizedCorpus:
        self.quantized = QuantizedCorpus.quantize(self.vectors, bits)
        return self.quantized

    def topk(self, query, k: int, quantized: bool = False) -> RetrievalResult:
        if quantized:
            if self.quantized is None:
                raise ConfigError("index has no quantized codes; build it with quantization enabled")
            return self.quantized.topk(query, k)
        return topk_exact(self, query, k)

    def topk_batch(self, queries: np.ndarray, k: int, quantized: bool = False):
        """Top-k for many queries: one GEMM for the scores, then per-row selection."""
        queries = np.asarray(queries, dtype=np.float32)
        if queries.ndim != 2 or queries.shape[1] != self.d:
            raise ConfigError(f"queries have width {queries.shape[-1]}, index has d_top={self.d}")
        _check_k(k, len(self))
        if quantized:
            if self.quantized is None:
                raise ConfigError("index has no quantized codes")
            q = self.quantized
            scores = queries @ (q.codes.astype(np.float32) * q.scale).T + (queries @ q.offset)[:, None]
        else:
            scores = queries @ self.vectors.T
        ids = np.empty((len(queries), k), dtype=np.int64)
        vals = np.empty((len(queries), k), dtype=np.float32)
        for r in range(len(queries)):
            ids[r], vals[r] = _kernels.topk_select(scores[r], k)
        return ids, vals


def _check_k(k: int, n: int) -> None:
    if not 1 <= int(k) <= n:
        raise ValueError(f"k={k} outside [1, {n}]")


def _query(query, d: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.size != d:
        raise ConfigError(f"query has width {q.size}, index has d_top={d}")
    return q


def topk_exact(corpus: IndexedCorpus, query, k: int) -> RetrievalResult:
    _check_k(k, len(corpus))
    ids, scores = _kernels.topk_dense(corpus.vectors, _query(query, corpus.d), int(k))
    return RetrievalResult(ids, scores)


def topk_quantized(corpus: QuantizedCorpus | IndexedCorpus, query, k: int) -> RetrievalResult:
    if isinstance(corpus, IndexedCorpus):
        return corpus.topk(query, k, quantized=True)
    _check_k(k, len(corpus))
    return corpus.topk(query, int(k))


def overlap(a: RetrievalResult, b: RetrievalResult) -> float:
    return len(np.intersect1d(a.ids, b.ids)) / max(len(a), 1)


def build_index(model, d_top: int | None = None, quantize: bool = False, bits: int = 8) -> IndexedCorpus:
    """Snapshot normalize(MLP_ntp(E[i])) for every item of a trained model."""
    expected = model.cfg.generator.d_top
    if d_top is not None and d_top != expected:
        raise ConfigError(f"requested d_top={d_top} but the checkpoint was trained with d_top={expected}")
    corpus = IndexedCorpus(model.item_vectors())
    if quantize:
        corpus.quantize(bits)
    return corpus


def save_index(corpus: IndexedCorpus, path) -> None:
    n, d = corpus.vectors.shape
    version = VERSION_QUANTIZED if corpus.quantized is not None else VERSION_DENSE
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", version, n, d))
        fh.write(corpus.vectors.astype("<f4").tobytes())
        if corpus.quantized is not None:
            q = corpus.quantized
            fh.write(struct.pack("<I", q.bits))
            fh.write(q.scale.astype("<f4").tobytes())
            fh.write(q.offset.astype("<f4").tobytes())
            fh.write(q.codes.astype(np.uint8).tobytes())


def load_index(path) -> IndexedCorpus:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ParseError(f"{path}: not an index file (bad magic)")
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version not in (VERSION_DENSE, VERSION_QUANTIZED):
        raise ParseError(f"{path}: unsupported index version {version}")
    pos = 16
    need = pos + 4 * n * d + (4 + 8 * d + n * d if version == VERSION_QUANTIZED else 0)
    if len(raw) != need:
        raise ParseError(f"{path}: expected {need} bytes, found {len(raw)}")
    vectors = np.frombuffer(raw, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float32)
    pos += 4 * n * d
    corpus = IndexedCorpus(vectors)
    if version == VERSION_QUANTIZED:
        (bits,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        scale = np.frombuffer(raw, dtype="<f4", count=d, offset=pos).astype(np.float32)
        offset = np.frombuffer(raw, dtype="<f4", count=d, offset=pos + 4 * d).astype(np.float32)
        codes = np.frombuffer(raw, dtype=np.uint8, count=n * d, offset=pos + 8 * d).reshape(n, d).copy()
        corpus.quantized = QuantizedCorpus(scale, offset, codes, bits)
    return corpus
