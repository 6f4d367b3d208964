"""Language-specific structured pruning toolkit.

Block-wise (8x1) iterative magnitude pruning and lottery-ticket rewinding,
group-lasso regularisation, joint training of masked per-language
sub-networks, and mask-overlap statistics, on a small numpy autodiff engine.
"""

from .blocks import BlockPartition, Mask, block_scores, partition_blocks
from .model import Model, ModelConfig, apply_mask, forward
from .pruning import PruneConfig, imp_run, iterations_to_target, lth_run, prune_step, random_mask

__version__ = "0.1.0"

__all__ = [
    "BlockPartition", "Mask", "Model", "ModelConfig", "PruneConfig", "apply_mask", "block_scores", "forward",
    "imp_run", "iterations_to_target", "lth_run", "partition_blocks", "prune_step", "random_mask",
]
