"""Two-stage inference and the closed-loop latency benchmark.

Stage 1 runs the generator on the user tokens only and scans the index for
the top ``k1`` items.  Stage 2 rescores those with the cross-attention
ranker and keeps the best ``k2``.  Stage-1 scores are discarded in stage 2.
"""

from __future__ import annotations

import csv
import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import MODES, ServingConfig
from .data import UserRecord
from .errors import ConfigError, ContractError, MaskError
from .mips import IndexedCorpus, RetrievalResult
from .numeric import no_grad, ops
from .numeric.tensor import constant

SLA_MS = 100.0


class Retriever:
    """Read-only bundle of model, index and serving settings.

    Safe to share across threads: requests allocate their own buffers and
    the only mutable field, the cached ranker query projections, is filled
    once under a lock.
    """

    def __init__(self, model, index: IndexedCorpus, cfg: ServingConfig | None = None):
        cfg = cfg or model.cfg.serving
        if index.d != model.cfg.generator.d_top:
            raise ConfigError(f"index d_top={index.d} does not match model d_top={model.cfg.generator.d_top}")
        if len(index) != model.n_items:
            raise ConfigError(f"index has {len(index)} items, model has {model.n_items}")
        cfg.check_corpus(len(index))
        if cfg.quantized and index.quantized is None:
            raise ConfigError("quantized serving requested but the index has no codes")
        self.model = model
        self.index = index
        self.cfg = cfg
        self._queries = None
        self._lock = threading.Lock()

    # -- cached item-side ranker projections -----------------------------
    def candidate_queries(self) -> np.ndarray:
        """``MLP_query(E[i]) W_Q`` for every item; user-independent, so computed once."""
        if self._queries is None:
            with self._lock:
                if self._queries is None:
                    table = self.model.item_embedding.data
                    rk = self.model.ranker
                    with no_grad():
                        parts = [rk.candidate_queries(constant(table[s : s + 4096])).data for s in range(0, len(table), 4096)]
                    self._queries = np.concatenate(parts, axis=0)
        return self._queries

    # -- stages -------------------------------------------------------------
    def query_vector(self, user: UserRecord) -> np.ndarray:
        return self.model.user_vectors([user])[0]

    def rank(self, user: UserRecord, candidates: np.ndarray, mode: str, long_len: int | None = None) -> np.ndarray:
        if mode == "gen_sa":
            return self.model.sa_rank_scores(user, candidates)
        enc = self.model.encode_history([user], long_len)
        q = constant(self.candidate_queries()[candidates])
        with no_grad():
            return self.model.ranker.score_queries(q, enc).data[0]

    def retrieve(self, user: UserRecord, k1: int | None = None, k2: int | None = None, mode: str | None = None,
                 long_len: int | None = None) -> RetrievalResult:
        k1 = k1 or self.cfg.k1
        k2 = k2 or self.cfg.k2
        mode = mode or self.cfg.mode
        if mode not in MODES:
            raise ConfigError(f"unknown serving mode {mode!r}")
        if not 1 <= k2 <= k1 <= len(self.index):
            raise ConfigError(f"need 1 <= k2 <= k1 <= |I|, got k1={k1} k2={k2} |I|={len(self.index)}")
        guard = self.model.generator.aux_tokens_processed
        t0 = time.perf_counter_ns()
        h = self.query_vector(user)
        t1 = time.perf_counter_ns()
        stage1 = self.index.topk(h, k1, quantized=self.cfg.quantized)
        t2 = time.perf_counter_ns()
        if self.model.generator.aux_tokens_processed != guard:
            raise ContractError("auxiliary candidate tokens were computed on the inference path")
        fallback = False
        if mode == "pure_generator":
            ids, scores = stage1.ids[:k2], stage1.scores[:k2]
        else:
            try:
                s = self.rank(user, stage1.ids, mode, long_len)
                order = np.lexsort((stage1.ids, -s))[:k2]
                ids, scores = stage1.ids[order], s[order].astype(np.float32)
            except MaskError:
                # no history to attend to: keep the generator's order
                ids, scores = stage1.ids[:k2], stage1.scores[:k2]
                fallback = True
        t3 = time.perf_counter_ns()
        if mode != "gen_sa" and self.model.generator.aux_tokens_processed != guard:
            raise ContractError("auxiliary candidate tokens were computed on the inference path")
        stage1.timings = {"generator": (t1 - t0) / 1e3, "mips": (t2 - t1) / 1e3}
        timings = {
            "generator": (t1 - t0) / 1e3,
            "mips": (t2 - t1) / 1e3,
            "rank": (t3 - t2) / 1e3,
            "total": (time.perf_counter_ns() - t0) / 1e3,
        }
        return RetrievalResult(ids=ids, scores=scores, stage="final", timings=timings, stage1=stage1, fallback=fallback)


def retrieve(user: UserRecord, model, index: IndexedCorpus, cfg: ServingConfig | None = None) -> RetrievalResult:
    return Retriever(model, index, cfg).retrieve(user)


# -- benchmark ------------------------------------------------------------------

STAGES = ("generator", "mips", "rank")


@dataclass
class BenchReport:
    requests: int
    concurrency: int
    p50_ms: float
    p99_ms: float
    mean_ms: float
    qps: float
    stage_ms: dict = field(default_factory=dict)  # mean per stage
    wall_s: float = 0.0
    warmup: int = 0
    k1: int = 0
    k2: int = 0
    mode: str = ""
    backend: str = ""
    sla_ms: float = SLA_MS
    sla_violated: bool = False

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)


REPORT_SCHEMA = {
    "requests": int,
    "concurrency": int,
    "p50_ms": float,
    "p99_ms": float,
    "mean_ms": float,
    "qps": float,
    "stage_ms": dict,
    "wall_s": float,
    "warmup": int,
    "k1": int,
    "k2": int,
    "mode": str,
    "backend": str,
    "sla_ms": float,
    "sla_violated": bool,
}


def validate_report(doc: dict) -> None:
    """Raise ValueError unless ``doc`` has the BenchReport fields, types and orderings."""
    for key, kind in REPORT_SCHEMA.items():
        if key not in doc:
            raise ValueError(f"bench report missing {key!r}")
        value = doc[key]
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) if kind is float else isinstance(value, kind)
        if kind is int and isinstance(value, bool):
            ok = False
        if not ok:
            raise ValueError(f"bench report field {key!r} has type {type(value).__name__}")
    if set(doc["stage_ms"]) != set(STAGES):
        raise ValueError("stage_ms must list generator, mips and rank")
    if doc["p50_ms"] > doc["p99_ms"]:
        raise ValueError("p50 exceeds p99")
    if doc["requests"] < 1 or doc["concurrency"] < 1:
        raise ValueError("empty benchmark")


def workload(users: list[UserRecord], n: int, seed: int) -> list[UserRecord]:
    """Deterministic request stream of ``n`` users drawn with replacement."""
    order = np.random.default_rng(seed).integers(0, len(users), size=n)
    return [users[i] for i in order]


def bench(retriever: Retriever, users: list[UserRecord], requests: int = 100, concurrency: int = 1, warmup: int = 5,
          seed: int = 0, duration_s: float | None = None, **retrieve_kw):
    """Closed-loop load: ``concurrency`` workers each issue their next request as soon as the last returns.

    Returns (BenchReport, per-request timing dicts in completion order).
    With ``duration_s`` set, workers stop taking requests after that many
    seconds even if the stream is not exhausted.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    stream = workload(users, warmup + requests, seed)
    for user in stream[:warmup]:
        retriever.retrieve(user, **retrieve_kw)
    pending = iter(stream[warmup:])
    lock = threading.Lock()
    samples: list[dict] = []
    deadline = None if duration_s is None else time.perf_counter() + duration_s
    errors: list[BaseException] = []

    def worker():
        while True:
            with lock:
                if deadline is not None and time.perf_counter() > deadline:
                    return
                user = next(pending, None)
            if user is None:
                return
            try:
                t0 = time.perf_counter_ns()
                res = retriever.retrieve(user, **retrieve_kw)
                latency = (time.perf_counter_ns() - t0) / 1e3
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
                return
            timing = dict(res.timings)
            timing["latency"] = latency
            with lock:
                samples.append(timing)

    start = time.perf_counter()
    threads = [threading.Thread(target=worker, daemon=True) for _ in range(concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - start
    if errors:
        raise errors[0]
    if not samples:
        raise RuntimeError("benchmark completed no requests")
    lat = np.array([s["latency"] for s in samples]) / 1e3
    report = BenchReport(
        requests=len(samples),
        concurrency=concurrency,
        p50_ms=float(np.percentile(lat, 50)),
        p99_ms=float(np.percentile(lat, 99)),
        mean_ms=float(lat.mean()),
        qps=float(len(samples) / wall),
        stage_ms={k: float(np.mean([s[k] for s in samples]) / 1e3) for k in STAGES},
        wall_s=float(wall),
        warmup=warmup,
        k1=int(retrieve_kw.get("k1") or retriever.cfg.k1),
        k2=int(retrieve_kw.get("k2") or retriever.cfg.k2),
        mode=str(retrieve_kw.get("mode") or retriever.cfg.mode),
        backend=_backend(),
    )
    report.sla_violated = bool(report.p99_ms > report.sla_ms)
    return report, samples


def _backend() -> str:
    from . import _kernels

    return _kernels.BACKEND


def write_histogram(samples: list[dict], path, bins: int = 50) -> None:
    """Latency histogram CSV: ``lo_ms, hi_ms, count`` with log-spaced bins."""
    lat = np.array([s["latency"] for s in samples]) / 1e3
    lo, hi = max(lat.min(), 1e-3), lat.max()
    edges = np.geomspace(lo, hi * 1.000001 if hi > lo else lo * 2, bins + 1)
    counts, _ = np.histogram(np.clip(lat, edges[0], edges[-1]), bins=edges)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lo_ms", "hi_ms", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{a:.6f}", f"{b:.6f}", int(c)])
