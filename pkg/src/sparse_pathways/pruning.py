"""Block-wise magnitude pruning: the IMP loop and its lottery-ticket rewinding variant."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from .blocks import BlockPartition, Mask, block_scores, partition_blocks
from .model import Model, apply_mask, restore_into, snapshot
from .regularization import LassoConfig, lasso_schedule
from .training import Batch, MetricsLog, TrainConfig, Trainer

__all__ = [
    "BlockPartition", "Mask", "PruneConfig", "PruneResult", "PruneWarning", "block_scores",
    "imp_run", "iterations_to_target", "lth_run", "partition_blocks", "prune_step", "random_mask",
    "target_block_count",
]

_TOL = 1e-9


class PruneWarning(UserWarning):
    """prune_step was asked to prune a mask that is already at the target."""


@dataclass(frozen=True)
class PruneConfig:
    """``interval`` is T, the training steps between prunes (0 = no training)."""

    p: float = 0.20
    interval: int = 200
    target_sparsity: float = 0.706
    mode: str = "imp"
    post_prune_finetune_steps: int = 2000

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if not 0 < self.target_sparsity < 1:
            raise ValueError("target_sparsity must lie in (0, 1)")
        if self.interval < 0 or self.post_prune_finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.mode not in ("imp", "lth"):
            raise ValueError(f"mode must be 'imp' or 'lth', got {self.mode!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def target_block_count(part: BlockPartition, order: np.ndarray, already_pruned: int,
                       target_sparsity: float) -> int:
    """How many blocks of ``order`` must go for the layer to first reach the target."""
    need = target_sparsity * part.size - already_pruned
    if need <= _TOL:
        return 0
    cum = np.cumsum(part.lengths[order])
    j = int(np.searchsorted(cum, need - _TOL, side="left"))
    return min(j + 1, len(order))


def prune_step(mask: Mask, scores: Mapping[str, np.ndarray], p: float, target_sparsity: float) -> Mask:
    """Drop the ``round(p * r)`` weakest surviving blocks of every layer.

    ``r`` is the layer's surviving block count.  If that would overshoot the
    target sparsity, only as many blocks as needed to reach it are pruned.
    Ties go to the lower (column, row) block.  Blocks are never revived.
    """
    out = mask.copy()
    touched = False
    for name, part in mask.partitions.items():
        alive_idx = np.flatnonzero(mask.bits[name])
        s = np.asarray(scores[name])
        if s.shape != (part.n_blocks,):
            raise ValueError(f"layer {name}: {s.shape} scores for {part.n_blocks} blocks")
        pruned = part.size - int(part.lengths[alive_idx].sum())
        if pruned >= target_sparsity * part.size - _TOL:
            continue
        # stable sort keeps ascending block index among equal scores
        order = alive_idx[np.argsort(s[alive_idx], kind="stable")]
        k = max(1, _round_half_up(p * len(alive_idx)))
        k = min(k, target_block_count(part, order, pruned, target_sparsity))
        out.bits[name][order[:k]] = False
        touched = True
    if not touched:
        warnings.warn("mask already at or above target sparsity; prune_step is a no-op", PruneWarning,
                      stacklevel=2)
    out.invalidate()
    return out


def iterations_to_target(p: float, target_sparsity: float) -> int:
    """Smallest n with 1 - (1 - p)^n >= target."""
    if not (0 < p < 1 and 0 < target_sparsity < 1):
        raise ValueError("p and target_sparsity must lie in (0, 1)")
    n = math.ceil(math.log(1 - target_sparsity) / math.log(1 - p))
    while n > 1 and 1 - (1 - p) ** (n - 1) >= target_sparsity - _TOL:
        n -= 1
    while 1 - (1 - p) ** n < target_sparsity - _TOL:
        n += 1
    return max(n, 1)


def at_target(mask: Mask, target_sparsity: float) -> bool:
    return all(mask.layer_sparsity(n) >= target_sparsity - _TOL for n in mask)


def random_mask(partitions: Mapping[str, BlockPartition], target_sparsity: float, seed: int,
                **meta) -> Mask:
    """Uniformly random blocks dropped per layer until the target is first reached."""
    if not 0 < target_sparsity < 1:
        raise ValueError("target_sparsity must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    mask = Mask.ones(partitions, source="random", **meta)
    for name, part in mask.partitions.items():
        order = rng.permutation(part.n_blocks)
        k = target_block_count(part, order, 0, target_sparsity)
        mask.bits[name][order[:k]] = False
    mask.invalidate()
    return mask


@dataclass
class IterationRecord:
    iteration: int
    sparsity: float
    surviving_fraction: float
    loss_before_prune: float | None = None
    loss_after_prune: float | None = None


@dataclass
class PruneResult:
    """Outcome of a pruning run.

    ``model`` holds theta_final for IMP and the untouched theta_0 for LTH.
    ``post_prune_loss`` is the evaluation loss right after the target was
    reached, before any fine-tuning (``None`` without an evaluator).
    """

    model: Model
    mask: Mask
    iterations: list[IterationRecord] = field(default_factory=list)
    post_prune_loss: float | None = None
    finetune_losses: list[float] = field(default_factory=list)

    def __iter__(self):
        yield self.model
        yield self.mask


Evaluator = Callable[[Model, Mask], float]
Hook = Callable[[str, int, Model, Mask], None]


def _prune_loop(theta0: Model, batches: Iterator[Batch], config: PruneConfig, lasso: LassoConfig,
                train: TrainConfig | None, evaluate: Evaluator | None, hook: Hook | None,
                metrics: MetricsLog | None, language: str, rewind: bool) -> tuple[PruneResult, Trainer]:
    if batches is None:
        raise ValueError("pruning needs a non-empty batch source")
    batches = iter(batches)
    model = theta0.clone()
    reference = snapshot(theta0) if rewind else None
    mask = Mask.ones(model.partitions, source=config.mode, language=language)
    trainer = Trainer(model, train, lasso, metrics)
    result = PruneResult(model, mask)
    stage = f"prune-{config.mode}"
    it = 0
    total_blocks = sum(p.n_blocks for p in model.partitions.values())
    while not at_target(mask, config.target_sparsity):
        if hook is not None:
            hook("iteration_start", it, model, mask)
        lasso_on = lasso.enabled and lasso_schedule(mask.sparsity(), config.target_sparsity)
        for _ in range(config.interval):
            try:
                batch = next(batches)
            except StopIteration:
                raise ValueError("batch source is empty") from None
            trainer.step(batch, mask, lasso_on, stage, language)
        record = IterationRecord(it + 1, 0.0, 0.0)
        if evaluate is not None:
            record.loss_before_prune = evaluate(model, mask)
        scores = {n: block_scores(model.params[n], p) for n, p in model.partitions.items()}
        mask = prune_step(mask, scores, config.p, config.target_sparsity)
        apply_mask(model, mask)
        if evaluate is not None:
            record.loss_after_prune = evaluate(model, mask)
        record.sparsity = mask.sparsity()
        record.surviving_fraction = sum(int(b.sum()) for b in mask.bits.values()) / total_blocks
        result.iterations.append(record)
        if rewind:
            restore_into(model, reference)
            apply_mask(model, mask)
            trainer.reset_optimizer()
        it += 1
        if hook is not None:
            hook("iteration_end", it, model, mask)
    result.mask = mask
    if result.iterations:
        result.post_prune_loss = result.iterations[-1].loss_after_prune
    return result, trainer


def imp_run(theta0: Model, batches: Iterator[Batch], config: PruneConfig,
            lasso: LassoConfig | None = None, train: TrainConfig | None = None,
            evaluate: Evaluator | None = None, hook: Hook | None = None,
            metrics: MetricsLog | None = None, language: str = "agnostic") -> PruneResult:
    """Iterative magnitude pruning continuing from theta_T, then fixed-mask fine-tuning.

    ``theta0`` itself is not modified.  Group lasso (when enabled) is active
    until the target sparsity is reached and off during fine-tuning.
    """
    lasso = lasso or LassoConfig(enabled=False)
    result, trainer = _prune_loop(theta0, batches, config, lasso, train, evaluate, hook,
                                  metrics, language, rewind=False)
    result.finetune_losses = trainer.run(iter(batches), config.post_prune_finetune_steps, result.mask,
                                         lasso_on=False, stage="finetune-imp", language=language)
    return result


def lth_run(theta0: Model, batches: Iterator[Batch], config: PruneConfig,
            lasso: LassoConfig | None = None, train: TrainConfig | None = None,
            evaluate: Evaluator | None = None, hook: Hook | None = None,
            metrics: MetricsLog | None = None, language: str = "agnostic") -> PruneResult:
    """Same loop as :func:`imp_run` but every prune rewinds the weights to theta_0.

    Returns a copy of theta_0 (bitwise) and the final mask; no fine-tuning is
    done here.
    """
    lasso = lasso or LassoConfig(enabled=False)
    config = PruneConfig(config.p, config.interval, config.target_sparsity, "lth",
                         config.post_prune_finetune_steps)
    result, _ = _prune_loop(theta0, batches, config, lasso, train, evaluate, hook,
                            metrics, language, rewind=True)
    result.model = theta0.clone()
    return result


def finetune_fixed_mask(theta: Model, mask: Mask, batches: Iterator[Batch], steps: int,
                        train: TrainConfig | None = None, metrics: MetricsLog | None = None,
                        language: str = "", stage: str = "finetune") -> Model:
    """Train f(x; m*theta) with the mask held fixed; returns a new model."""
    model = apply_mask(theta.clone(), mask)
    Trainer(model, train, None, metrics).run(iter(batches), steps, mask, False, stage, language)
    return model
