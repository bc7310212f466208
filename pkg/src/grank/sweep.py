"""Hyper-parameter sweeps over long-history length, candidate size and top dimension.

``long_len`` and ``k1`` reuse one trained checkpoint.  ``d_top`` changes the
shape of the MIPS space, so each value trains its own model from the same
seed and data.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import Config, ServingConfig
from .data import Dataset
from .errors import ConfigError
from .evaluate import evaluate
from .mips import build_index
from .serving import Retriever, bench

log = logging.getLogger(__name__)

AXES = ("long_len", "k1", "d_top")


@dataclass
class SweepRow:
    axis: str
    value: int
    metrics: dict = field(default_factory=dict)  # "recall@50" -> value, ...
    qps: float = 0.0
    p99_ms: float = 0.0

    def flat(self) -> dict:
        return {"axis": self.axis, "value": self.value, **self.metrics, "qps": self.qps, "p99_ms": self.p99_ms}


def sweep(axis: str, values, model, test: Dataset, ks=(50, 500), train: Dataset | None = None,
          bench_requests: int = 50, concurrency: int = 1, eval_users: int | None = None) -> list[SweepRow]:
    """One evaluation (and one short benchmark) per value on ``axis``."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if axis == "d_top" and train is None:
        raise ConfigError("a d_top sweep retrains per value and needs the training split")
    users = test.users[:eval_users] if eval_users else test.users
    base: Config = model.cfg
    rows = []
    for value in values:
        value = int(value)
        current, overrides = model, {}
        k1, k2 = base.serving.k1, base.serving.k2
        if axis == "k1":
            k1, k2 = value, min(k2, value)
        elif axis == "long_len":
            overrides["long_len"] = value
        else:
            from .trainer import train_loop

            cfg = copy.deepcopy(base)
            cfg.update({"generator.d_top": value})
            current = train_loop(train, cfg).model
        serving = ServingConfig(k1=k1, k2=k2, quantized=base.serving.quantized, mode=base.serving.mode)
        index = build_index(current, quantize=serving.quantized)
        result = evaluate(current, index, users, serving, ks=tuple(k for k in ks if k <= k2),
                          fingerprint=current.cfg.fingerprint(), **overrides)
        metrics = {}
        for k, r in result.final.items():
            metrics[f"recall@{k}"] = r.recall
            metrics[f"ndcg@{k}"] = r.ndcg
        metrics[f"stage1_recall@{k1}"] = result.stage1[k1].recall
        ret = Retriever(current, index, serving)
        report, _ = bench(ret, users, requests=bench_requests, concurrency=concurrency, warmup=2, k1=k1, k2=k2,
                          long_len=overrides.get("long_len"))
        rows.append(SweepRow(axis, value, metrics, report.qps, report.p99_ms))
        log.info("sweep %s=%d %s", axis, value, metrics)
    return rows


def write_csv(rows: list[SweepRow], path) -> Path:
    path = Path(path)
    flat = [r.flat() for r in rows]
    names = list(dict.fromkeys(k for row in flat for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        w.writerows(flat)
    return path
