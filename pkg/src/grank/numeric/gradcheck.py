"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError
from .tensor import Parameter, Tensor, zero_grads


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)  # max relative error per parameter
    checked: dict[str, int] = field(default_factory=dict)  # entries probed per parameter

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol

    def __str__(self):
        lines = [f"{name}: {err:.3e} ({self.checked[name]} entries)" for name, err in self.errors.items()]
        return "\n".join(lines)


def _scalar(loss_fn) -> float:
    out = loss_fn()
    value = float(np.sum(out.data if isinstance(out, Tensor) else out))
    return value


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_entries: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytical gradients with ``(f(θ+h) - f(θ-h)) / 2h``.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dominating.  When
    ``max_entries`` is set, that many entries per parameter are sampled.
    Expects 64-bit parameters.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    zero_grads(params)
    loss = loss_fn()
    value = float(np.sum(loss.data))
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite at the base point ({value})")
    loss.backward()
    analytic = {id(p): p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for p in params:
        name = p.name or f"param{len(report.errors)}"
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        a_flat = analytic[id(p)].reshape(-1)
        worst = 0.0
        for i in idx:
            original = flat[i]
            flat[i] = original + step
            up = _scalar(loss_fn)
            flat[i] = original - step
            down = _scalar(loss_fn)
            flat[i] = original
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"loss became non-finite while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * step)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.errors[name] = float(worst)
        report.checked[name] = int(len(idx))
    zero_grads(params)
    return report
