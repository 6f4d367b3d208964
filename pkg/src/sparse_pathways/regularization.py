"""Group-lasso penalty over 8x1 blocks with per-layer dynamic strength."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import BlockPartition, Mask
from .tensor import Tensor, add, group_l2_norms, masked, scale, total

LAMBDA_FLOOR = 1e-8


@dataclass(frozen=True)
class LassoConfig:
    base_strength: float = 1e-3
    enabled: bool = True
    recompute_interval: int = 100

    def __post_init__(self):
        if not (self.base_strength >= 0 and np.isfinite(self.base_strength)):
            raise ValueError("base_strength must be a finite non-negative number")
        if self.recompute_interval < 1:
            raise ValueError("recompute_interval must be >= 1")


def dynamic_lambdas(params: dict[str, np.ndarray], partitions: dict[str, BlockPartition],
                    base_strength: float, mask: Mask | None = None) -> dict[str, float]:
    """lambda_i = base / mean block norm of layer i.

    With a mask, the mean runs over surviving blocks only, so pruned (zero)
    blocks do not inflate the strength.
    """
    if not partitions:
        raise ValueError("model has no prunable layers")
    out = {}
    for name, part in partitions.items():
        norms = part.block_norms(params[name]).astype(np.float64)
        if mask is not None:
            norms = norms[mask.bits[name]]
        mean = float(norms.mean()) if norms.size else 0.0
        out[name] = float(base_strength / max(mean, LAMBDA_FLOOR))
    return out


def lasso_penalty(tensors: dict[str, Tensor], partitions: dict[str, BlockPartition],
                  lambdas: dict[str, float], mask: Mask | None = None) -> Tensor:
    """sum_i lambda_i * sum_g ||W_g^(i)||_2 as a differentiable 1x1 tensor.

    Masked blocks are excluded through :func:`masked`, so no gradient
    reaches them.
    """
    if set(lambdas) != set(partitions):
        raise ValueError("lambdas are not aligned with the prunable layers")
    penalty = None
    for name, part in partitions.items():
        w = tensors[name]
        if mask is not None:
            w = masked(w, mask.expanded(name))
        term = scale(total(group_l2_norms(w, part)), lambdas[name])
        penalty = term if penalty is None else add(penalty, term)
    return penalty


def penalty_value(params: dict[str, np.ndarray], partitions: dict[str, BlockPartition],
                  lambdas: dict[str, float]) -> float:
    return float(sum(lambdas[n] * p.block_norms(params[n]).astype(np.float64).sum()
                     for n, p in partitions.items()))


def lasso_schedule(current_sparsity: float, target_sparsity: float, stage: str = "pruning") -> bool:
    """Whether the penalty is active.

    On during dense training and pruning iterations, off once the target
    sparsity is reached and always off while training pathways.
    """
    if stage == "pathways":
        return False
    if stage not in ("dense", "pruning", "finetune"):
        raise ValueError(f"unknown stage {stage!r}")
    return current_sparsity < target_sparsity - 1e-12 if stage != "dense" else True


def mean_block_norm(params: dict[str, np.ndarray], partitions: dict[str, BlockPartition]) -> float:
    norms = np.concatenate([p.block_norms(params[n]) for n, p in partitions.items()])
    return float(norms.astype(np.float64).mean())
