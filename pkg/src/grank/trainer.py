"""Joint multi-task training: NTP + auxiliary self-attention + cross-attention ranker."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_model, read_checkpoint, save_checkpoint
from .config import Config, TrainingConfig
from .data import Batch, Dataset, batch_iterator
from .errors import NonFiniteError
from .model import GRankModel, LossBreakdown
from .numeric import Parameter, precision

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, params: dict[str, Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg: TrainingConfig) -> "Adam":
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values())))

    def step(self) -> float:
        """Clip to the global norm, then update. Returns the pre-clip norm."""
        norm = self.grad_norm()
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad * factor if factor != 1.0 else p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr:
                p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([[self.t]], dtype=np.float64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if not state:
            return
        self.t = int(state["t"].reshape(-1)[0])
        for k, p in self.params.items():
            self.m[k] = state[f"m.{k}"].reshape(p.data.shape).astype(p.data.dtype)
            self.v[k] = state[f"v.{k}"].reshape(p.data.shape).astype(p.data.dtype)


def total_loss(model: GRankModel, col, weights) -> LossBreakdown:
    return model.losses(col, weights)


def _check_finite(values: dict, batch: Batch, step: int, dump_dir: Path | None) -> None:
    bad = {k: v for k, v in values.items() if v is not None and not np.isfinite(v)}
    if not bad:
        return
    dump = {
        "step": step,
        "losses": {k: (None if v is None else float(v)) for k, v in values.items()},
        "user_ids": [int(u.user_id) for u in batch.users],
        "targets": [int(t) for t in batch.targets],
    }
    where = ""
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / f"nonfinite_step{step}.json"
        path.write_text(json.dumps(dump, indent=1))
        where = f"; dump written to {path}"
    raise NonFiniteError(f"non-finite loss at step {step}: {bad}; batch user ids {dump['user_ids']}{where}")


def train_step(model: GRankModel, batch: Batch, optimizer: Adam, cfg: TrainingConfig, step: int = 0,
               dump_dir: Path | None = None) -> dict:
    """One forward/backward/Adam update on ``batch``; returns the loss values."""
    col = model.collate(batch.users)
    optimizer.zero_grad()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        losses = total_loss(model, col, cfg.weights)
        values = losses.values()
        _check_finite(values, batch, step, dump_dir)
        losses.total.backward()
    values["grad_norm"] = optimizer.step()
    return values


@dataclass
class TrainResult:
    model: GRankModel
    optimizer: Adam
    step: int
    checkpoints: list[Path] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def last_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


def epoch_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


def train_loop(
    dataset: Dataset,
    cfg: Config,
    run_dir=None,
    resume=None,
    eval_hook: Callable[[GRankModel, int], dict] | None = None,
    eval_every: int | None = None,
    model: GRankModel | None = None,
) -> TrainResult:
    """Epoch loop over shuffled batches with a checkpoint per epoch.

    ``resume`` names a checkpoint; training continues from its step counter
    with the same batch order an uninterrupted run would have used.
    ``epochs=0`` writes the initialization as the only checkpoint.
    """
    tc = cfg.trainer
    run_dir = Path(run_dir) if run_dir is not None else None
    with precision(tc.precision):
        start = 0
        if resume is not None:
            # architecture comes from the checkpoint; the schedule from ``cfg``
            model, ckpt = load_model(resume)
            model.cfg.trainer = tc
            optimizer = Adam.from_config(model.parameter_dict(), tc)
            optimizer.load_state_dict(ckpt.optimizer)
            start = ckpt.step
        else:
            model = model or GRankModel(cfg, dataset.n_items, dataset.demographics_width, seed=tc.seed)
            optimizer = Adam.from_config(model.parameter_dict(), tc)
        result = TrainResult(model=model, optimizer=optimizer, step=start)
        log_file = None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(run_dir / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")
        try:
            if tc.epochs == 0 and run_dir is not None:
                result.checkpoints.append(save_checkpoint(run_dir / "init.grnk", model, 0, optimizer))
            per_epoch = len(dataset) // tc.batch_size
            step = start
            done = tc.max_steps is not None and step >= tc.max_steps
            for epoch in range(start // max(per_epoch, 1), tc.epochs):
                if done:
                    break
                skip = step - epoch * per_epoch
                for b, batch in enumerate(batch_iterator(dataset, tc.batch_size, epoch_seed(tc.seed, epoch))):
                    if b < skip:
                        continue
                    t0 = time.perf_counter()
                    values = train_step(model, batch, optimizer, tc, step + 1, run_dir)
                    step += 1
                    entry = {"step": step, "epoch": epoch, **values, "ms": (time.perf_counter() - t0) * 1e3}
                    result.history.append(entry)
                    if step % tc.log_interval == 0:
                        log.info("step %d total %.4f", step, values["total"])
                        if log_file is not None:
                            log_file.write(json.dumps(entry) + "\n")
                            log_file.flush()
                    if eval_hook is not None and eval_every and step % eval_every == 0:
                        eval_hook(model, step)
                    if tc.max_steps is not None and step >= tc.max_steps:
                        done = True
                        break
                result.step = step
                if run_dir is not None:
                    name = f"epoch{epoch + 1}.grnk" if not done or step == (epoch + 1) * per_epoch else f"step{step}.grnk"
                    result.checkpoints.append(save_checkpoint(run_dir / name, model, step, optimizer, {"epoch": epoch + 1}))
            result.step = step
            if run_dir is not None and result.checkpoints:
                last = save_checkpoint(run_dir / "last.grnk", model, step, optimizer)
                result.checkpoints.append(last)
        finally:
            if log_file is not None:
                log_file.close()
    return result


def checkpoint_step(path) -> int:
    return read_checkpoint(path).step
