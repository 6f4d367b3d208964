"""Masked training steps shared by dense training, pruning and pathways."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .blocks import Mask
from .model import Model, forward
from .regularization import LassoConfig, dynamic_lambdas, lasso_penalty
from .tensor import AdamState, add, adam_step

Batch = tuple[np.ndarray, np.ndarray]

METRICS_HEADER = ["step", "stage", "language", "loss", "accuracy", "sparsity", "lambda_mean"]


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or Inf."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` then constant."""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)


@dataclass
class MetricsLog:
    """In-memory metrics rows, optionally flushed to CSV."""

    rows: list[tuple] = field(default_factory=list)
    every: int = 1
    lambdas: list[tuple] = field(default_factory=list)

    def add(self, step, stage, language, loss, accuracy, sparsity, lambda_mean) -> None:
        if step % self.every == 0:
            self.rows.append((step, stage, language, loss, accuracy, sparsity, lambda_mean))

    def add_lambdas(self, step: int, lambdas: dict[str, float]) -> None:
        self.lambdas.extend((step, name, lam) for name, lam in lambdas.items())

    def write_lambdas(self, path) -> None:
        if not self.lambdas:
            return
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "layer", "lambda"])
            w.writerows([step, name, f"{lam:.6g}"] for step, name, lam in self.lambdas)

    def write(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for step, stage, lang, loss, acc, sp, lam in self.rows:
                w.writerow([step, stage, lang, f"{loss:.6f}", f"{acc:.6f}", f"{sp:.6f}", f"{lam:.6g}"])


class Trainer:
    """Owns the optimizer state for one model and runs masked Adam steps.

    Positions where ``mask`` is zero get exact-zero gradients and are frozen
    in the optimizer, so their weights and moments never change.
    """

    def __init__(self, model: Model, config: TrainConfig | None = None,
                 lasso: LassoConfig | None = None, metrics: MetricsLog | None = None):
        self.model = model
        self.config = config or TrainConfig()
        self.lasso = lasso or LassoConfig(enabled=False)
        self.metrics = metrics
        self.state = AdamState()
        self.steps = 0
        self.lambdas: dict[str, float] | None = None
        self._since_recompute = 0

    def reset_optimizer(self) -> None:
        self.state = AdamState()

    def _lambdas(self, mask: Mask | None) -> dict[str, float]:
        if self.lambdas is None or self._since_recompute >= self.lasso.recompute_interval:
            self.lambdas = dynamic_lambdas(self.model.params, self.model.partitions,
                                           self.lasso.base_strength, mask)
            self._since_recompute = 0
            if self.metrics is not None:
                self.metrics.add_lambdas(self.steps, self.lambdas)
        self._since_recompute += 1
        return self.lambdas

    def step(self, batch: Batch, mask: Mask | None = None, lasso_on: bool = False,
             stage: str = "train", language: str = "") -> tuple[float, float]:
        x, y = batch
        model = self.model
        tensors = model.tensors(requires_grad=True)
        loss, acc = forward(model, x, y, mask, tensors)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at step {self.steps} (stage={stage}, language={language or '-'})")
        objective = loss
        lam_mean = 0.0
        if lasso_on and self.lasso.enabled and self.lasso.base_strength > 0:
            lambdas = self._lambdas(mask)
            lam_mean = float(np.mean(list(lambdas.values())))
            objective = add(loss, lasso_penalty(tensors, model.partitions, lambdas, mask))
        objective.backward()
        grads = {n: t.grad for n, t in tensors.items() if t.grad is not None}
        frozen = None
        if mask is not None:
            frozen = {n: ~mask.expanded(n) for n in mask}
        c = self.config
        adam_step(model.params, grads, self.state, c.lr_at(self.steps), c.beta1, c.beta2, c.eps, frozen)
        if self.metrics is not None:
            sparsity = mask.sparsity() if mask is not None else 0.0
            self.metrics.add(self.steps, stage, language, value, acc, sparsity, lam_mean)
        self.steps += 1
        return value, acc

    def run(self, batches: Iterator[Batch], steps: int, mask: Mask | None = None,
            lasso_on: bool = False, stage: str = "train", language: str = "") -> list[float]:
        losses = []
        for _ in range(steps):
            losses.append(self.step(next(batches), mask, lasso_on, stage, language)[0])
        return losses
