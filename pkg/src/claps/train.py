"""Optimizers, warm-up schedule and the single-modality training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Sample, epoch_batches
from .losses import LossBreakdown, LossWeights, modality_weights
from .model import ClapsModel
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class SGD:
    """Gradient descent with optional heavy-ball momentum."""

    kind = "sgd"

    def __init__(self, named: Sequence[tuple[str, Tensor]], momentum: float = 0.0):
        self.named = list(named)
        self.momentum = momentum
        self.buf = {n: np.zeros_like(p.data) for n, p in self.named} if momentum else {}

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        for (n, p), g in zip(self.named, grads):
            if self.momentum:
                b = self.buf[n]
                b *= self.momentum
                b += g
                g = b
            p.data -= lr * g

    def state(self) -> dict[str, np.ndarray]:
        return {f"buf.{n}": b for n, b in self.buf.items()}

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        for n in self.buf:
            self.buf[n][...] = st[f"buf.{n}"]


class Adam:
    kind = "adam"

    def __init__(self, named: Sequence[tuple[str, Tensor]], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.named = list(named)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (n, p), g in zip(self.named, grads):
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        st = {f"m.{n}": a for n, a in self.m.items()}
        st.update({f"v.{n}": a for n, a in self.v.items()})
        st["t"] = np.array(float(self.t))
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        for n in self.m:
            self.m[n][...] = st[f"m.{n}"]
            self.v[n][...] = st[f"v.{n}"]
        self.t = int(st["t"])


def make_optimizer(model: ClapsModel):
    cfg = model.cfg
    if cfg.optimizer == "adam":
        return Adam(model.trainable())
    return SGD(model.trainable(), cfg.momentum)


def warmup_lr(base: float, step: int, warmup_steps: int) -> float:
    """Linear ramp from base/warmup_steps up to base, then constant."""
    if warmup_steps <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup_steps)


def train_step(model: ClapsModel, batch: Sequence[Sample], optimizer, lr: float,
               w: LossWeights | None = None, step: int = 0) -> LossBreakdown:
    """One gradient update.  Parameters are untouched if the loss or any
    gradient is non-finite."""
    named = optimizer.named
    with GradTape() as tape:
        try:
            total, bd, _ = model.loss(batch, w, step)
        except FloatingPointError as exc:
            raise TrainingAborted(f"step {step}: {exc}", step) from None
    grads = tape.gradient(total, [p for _, p in named])
    for (n, _), g in zip(named, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"step {step}: non-finite gradient for {n}", step)
    optimizer.step(grads, lr)
    return bd


@dataclass
class Schedule:
    steps_per_epoch: int
    total_steps: int
    warmup_steps: int


class Trainer:
    """Deterministic training over a dataset's train split.

    The batch for global step ``t`` depends only on the seed and ``t``, so a
    run resumed from a checkpoint continues exactly where it stopped.
    """

    def __init__(self, model: ClapsModel, dataset: Dataset, split: str = "train"):
        self.model = model
        self.dataset = dataset
        self.split = split
        cfg = model.cfg
        freqs = dataset.frequencies(split)
        if not freqs:
            raise ValueError(f"dataset has no samples in split {split!r}")
        w = cfg.loss
        if not w.omega:
            w = LossWeights.from_dict({**w.to_dict(), "omega": modality_weights(freqs)})
        self.weights = w
        self.optimizer = make_optimizer(model)
        self.step = 0
        self._epochs: dict[int, list[list[Sample]]] = {}
        spe = len(self._batches(0))
        if cfg.steps is not None:
            total = cfg.steps
            warm = int(round(cfg.steps * cfg.warmup_epochs / cfg.epochs)) if cfg.epochs else 0
        else:
            total = cfg.epochs * spe
            warm = cfg.warmup_epochs * spe
        self.schedule = Schedule(spe, total, warm)

    def _batches(self, epoch: int) -> list[list[Sample]]:
        if epoch not in self._epochs:
            self._epochs = {epoch: epoch_batches(self.dataset, self.model.cfg.batch_size,
                                                 self.model.cfg.seed, epoch, self.split)}
        return self._epochs[epoch]

    def batch_at(self, step: int) -> list[Sample]:
        spe = self.schedule.steps_per_epoch
        return self._batches(step // spe)[step % spe]

    def lr_at(self, step: int) -> float:
        return warmup_lr(self.model.cfg.learning_rate, step, self.schedule.warmup_steps)

    def run(self, steps: int | None = None,
            callback: Callable[[int, LossBreakdown], None] | None = None) -> list[LossBreakdown]:
        """Advance until ``steps`` more updates (default: the full schedule) are done."""
        end = self.schedule.total_steps if steps is None else min(self.step + steps, self.schedule.total_steps)
        history = []
        while self.step < end:
            t = self.step
            bd = train_step(self.model, self.batch_at(t), self.optimizer, self.lr_at(t), self.weights, t)
            if not math.isfinite(bd.total):
                raise TrainingAborted(f"step {t}: non-finite loss", t)
            history.append(bd)
            self.step += 1
            if callback:
                callback(t, bd)
        return history

    # -- resumable state ------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        st = {f"optim.{k}": v for k, v in self.optimizer.state().items()}
        st["trainer.step"] = np.array(float(self.step))
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        self.optimizer.load_state({k[len("optim."):]: v for k, v in st.items() if k.startswith("optim.")})
        self.step = int(st["trainer.step"])


def mean_objective(model: ClapsModel, dataset: Dataset, weights: LossWeights, split: str = "train",
                   batch_size: int | None = None) -> float:
    """Weighted total averaged over a split, with fixed per-modality batches.

    Single training batches swing with their modality weight; this gives one
    number per parameter state for convergence comparisons.
    """
    bs = batch_size or model.cfg.batch_size
    total, count = 0.0, 0
    for m in dataset.registry:
        members = [s for s in dataset.samples if s.split == split and s.modality == m]
        for start in range(0, len(members), bs):
            chunk = members[start:start + bs]
            _, bd, _ = model.loss(chunk, weights)
            total += bd.total * len(chunk)
            count += len(chunk)
    return total / count
