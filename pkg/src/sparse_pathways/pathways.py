"""Joint multi-language training where each language only updates its own sub-network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .blocks import Mask
from .model import Model, apply_mask
from .training import Batch, MetricsLog, TrainConfig, Trainer


@dataclass
class LanguageTask:
    language: str
    batches: Iterator[Batch]
    n_examples: int
    mask: Mask

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError(f"{self.language}: n_examples must be >= 1")


@dataclass(frozen=True)
class SamplingPolicy:
    """Temperature sampling over languages: p_l proportional to n_l ** alpha."""

    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


def language_probabilities(counts: Sequence[float], alpha: float) -> np.ndarray:
    w = np.asarray(counts, dtype=np.float64) ** alpha
    return w / w.sum()


def sample_language(policy: SamplingPolicy, tasks: Sequence[LanguageTask] | Sequence[int],
                    rng: np.random.Generator) -> int:
    """Index of the language for the next batch.

    ``tasks`` may be the task list or the raw example counts.
    """
    if len(tasks) == 0:
        raise ValueError("need at least one language")
    counts = [t.n_examples if isinstance(t, LanguageTask) else t for t in tasks]
    probs = language_probabilities(counts, policy.alpha)
    return int(rng.choice(len(probs), p=probs))


def pathways_step(trainer: Trainer, task: LanguageTask, batch: Batch | None = None) -> dict:
    """Forward/backward through m_lang * theta and update only that sub-network."""
    trainer.model.check_mask(task.mask)
    if batch is None:
        batch = next(task.batches)
    loss, acc = trainer.step(batch, task.mask, lasso_on=False, stage="pathways", language=task.language)
    return {"step": trainer.steps - 1, "language": task.language, "loss": loss, "accuracy": acc}


def union_mask(masks: Sequence[Mask]) -> Mask:
    out = masks[0].copy(language="union")
    for m in masks[1:]:
        if not m.same_layout(out):
            raise ValueError("masks have different layouts")
        for n in out:
            out.bits[n] |= m.bits[n]
    out.invalidate()
    return out


def train_pathways(theta0: Model, tasks: Sequence[LanguageTask], steps: int,
                   policy: SamplingPolicy | None = None, train: TrainConfig | None = None,
                   metrics: MetricsLog | None = None) -> Model:
    """Return theta*, trained from a copy of theta_0 with per-language masks.

    Weights outside the union of all masks are zeroed at the start; no
    language ever reads or updates them.
    """
    if not tasks:
        raise ValueError("train_pathways needs at least one language mask")
    policy = policy or SamplingPolicy()
    model = theta0.clone()
    for t in tasks:
        model.check_mask(t.mask)
    apply_mask(model, union_mask([t.mask for t in tasks]))
    trainer = Trainer(model, train, None, metrics)
    rng = np.random.default_rng(policy.seed)
    for _ in range(steps):
        pathways_step(trainer, tasks[sample_language(policy, tasks, rng)])
    return model


def per_language_masks(tasks: Sequence[LanguageTask]) -> Mapping[str, Mask]:
    return {t.language: t.mask for t in tasks}
