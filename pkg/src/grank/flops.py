"""Multiply-add counts for full vs decomposed candidate attention.

Only the attention-score terms are counted, since those are what the
complexity comparison is about:

* full: every one of the L+B tokens scores every other, ``(L+B)^2 d``;
* decomposed: history self-attention ``L^2 d``, candidate-to-history
  scores ``B L d`` and one self-correlation per candidate ``B d``.

Value aggregation (weights times values) is reported separately.  It has
the same structure and is left out of the headline fraction.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class FlopsBreakdown:
    L: int
    B: int
    d: int
    full: int
    decomposed: int
    full_values: int
    decomposed_values: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.decomposed / self.full if self.full else 0.0

    @property
    def value_reduction(self) -> float:
        return 1.0 - self.decomposed_values / self.full_values if self.full_values else 0.0


def flops_report(L: int, B: int, d: int) -> FlopsBreakdown:
    if L < 1 or d < 1 or B < 0:
        raise ValueError("need L >= 1, d >= 1 and B >= 0")
    return FlopsBreakdown(
        L=L,
        B=B,
        d=d,
        full=(L + B) ** 2 * d,
        decomposed=L * L * d + B * L * d + B * d,
        # a causal row mixes at most its visible values; counted densely like the scores
        full_values=(L + B) ** 2 * d,
        decomposed_values=L * L * d + B * L * d + B * d,
    )
