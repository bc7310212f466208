"""Self-checks behind ``grank verify``: decomposition equivalence, gradients, leakage.

Each check returns a :class:`Check`; the command exits nonzero if any fails.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .attention import AttentionMask, decomposed_attention, full_attention_oracle
from .config import Config
from .data import chronological_split, synth_generate
from .generator import CandidateBatch
from .model import GRankModel
from .numeric import grad_check, precision
from .numeric.tensor import constant

GRID = dict(L=(2, 8, 64), B=(1, 16, 300), d=(4, 32, 128))
TOLERANCE = {"32": 1e-5, "64": 1e-10}


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (limit {self.limit:.3g}, {self.seconds:.1f}s){' ' + self.detail if self.detail else ''}"


def _instance(rng, L, B, d):
    t = L + 1  # history plus the query token
    valid = np.ones(t, dtype=bool)
    valid[: int(rng.integers(0, t))] = False
    x = rng.standard_normal((t, d))
    c = rng.standard_normal((B, d))
    w = [rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(3)]
    return x, c, w, AttentionMask.causal(valid)


def equivalence_error(L: int, B: int, d: int, seed: int, bits: str) -> float:
    rng = np.random.default_rng(seed)
    x, c, w, mask = _instance(rng, L, B, d)
    dtype = np.float64 if bits == "64" else np.float32
    with precision(bits):
        o_x, o_c = decomposed_attention(*(constant(a.astype(dtype)) for a in (x, c, *w)), mask)
    r_x, r_c = full_attention_oracle(x, c, *w, mask)
    return float(max(np.abs(o_x.data - r_x).max(), np.abs(o_c.data - r_c).max()))


def check_equivalence(seeds: int = 20, grid: dict | None = None) -> list[Check]:
    grid = grid or GRID
    out = []
    for bits in ("32", "64"):
        t0 = time.perf_counter()
        worst = 0.0
        for L, B, d in itertools.product(grid["L"], grid["B"], grid["d"]):
            for seed in range(seeds):
                worst = max(worst, equivalence_error(L, B, d, seed, bits))
        limit = TOLERANCE[bits]
        out.append(Check(f"decomposition equivalence ({bits}-bit)", worst <= limit, worst, limit, time.perf_counter() - t0))
    return out


def tiny_model(seed: int = 0, **overrides):
    cfg = Config()
    cfg.update(
        {
            "generator.d": 6,
            "generator.L": 5,
            "generator.N": 1,
            "generator.d_top": 4,
            "generator.behavior_window": 8,
            "ranker.long_len": 8,
            **overrides,
        }
    )
    train, _ = chronological_split(synth_generate(seed, 30, 12, 3, 12))
    model = GRankModel(cfg, train.n_items, train.demographics_width, seed=seed)
    return model, train


def check_gradients(seeds: int = 2, entries: int = 6, limit: float = 1e-4) -> list[Check]:
    """Finite-difference check of each loss and of their sum, in 64-bit."""
    weights = {"L_NTP": (1, 0, 0), "L_SA-info": (0, 1, 0), "L_CA-info": (0, 0, 1), "L_total": (1, 1, 1)}
    out = []
    with precision("64"):
        for name, w in weights.items():
            t0 = time.perf_counter()
            worst = 0.0
            for seed in range(seeds):
                model, train = tiny_model(seed)
                model.cast(np.float64)
                col = model.collate(train.users[:6])
                report = grad_check(lambda: model.losses(col, w).total, list(model.parameters()), max_entries=entries,
                                    floor=1e-5, seed=seed)
                worst = max(worst, report.max_error)
            out.append(Check(f"gradient {name}", worst <= limit, worst, limit, time.perf_counter() - t0))
    return out


def check_leakage(seeds: int = 3) -> list[Check]:
    """h_u bitwise-identical with and without candidates; moving any one candidate leaves the rest untouched."""
    t0 = time.perf_counter()
    diff_u = diff_c = 0.0
    for seed in range(seeds):
        model, train = tiny_model(seed)
        col = model.collate(train.users[:6])
        table = model.item_embedding
        alone = model.generator(col, table, None, training=True)
        items = np.arange(5) % model.n_items
        joined = model.generator(col, table, CandidateBatch(items), training=True)
        diff_u = max(diff_u, float(np.abs(alone.h_u.data - joined.h_u.data).max()))
        for j in range(items.size):
            moved = items.copy()
            moved[j] = (items[j] + 7) % model.n_items
            other = model.generator(col, table, CandidateBatch(moved), training=True)
            keep = np.arange(items.size) != j
            diff_u = max(diff_u, float(np.abs(other.h_u.data - joined.h_u.data).max()))
            diff_c = max(diff_c, float(np.abs(other.h_c.data[:, keep] - joined.h_c.data[:, keep]).max()))
    seconds = time.perf_counter() - t0
    return [
        Check("leakage: h_u with vs without candidates", diff_u == 0.0, diff_u, 0.0, seconds),
        Check("leakage: candidate isolation", diff_c == 0.0, diff_c, 0.0, seconds),
    ]


def run_all(quick: bool = False) -> list[Check]:
    seeds = 3 if quick else 20
    return [*check_equivalence(seeds), *check_gradients(1 if quick else 2), *check_leakage()]
