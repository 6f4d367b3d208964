"""8x1 block partitions of weight matrices and block-granular binary masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping

import numpy as np

BLOCK_ROWS = 8


@dataclass(frozen=True)
class BlockPartition:
    """Tiling of a ``rows x cols`` matrix into column blocks of up to 8 rows.

    Blocks are ordered column-major: all blocks of column 0 top to bottom,
    then column 1, and so on.  When ``rows`` is not a multiple of 8 the last
    block of every column is shorter.
    """

    rows: int
    cols: int
    block_rows: int = BLOCK_ROWS

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"layer shape must be positive, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def blocks_per_col(self) -> int:
        return -(-self.rows // self.block_rows)

    @property
    def n_blocks(self) -> int:
        return self.blocks_per_col * self.cols

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @cached_property
    def lengths(self) -> np.ndarray:
        per_col = np.full(self.blocks_per_col, self.block_rows, dtype=np.int64)
        per_col[-1] = self.rows - self.block_rows * (self.blocks_per_col - 1)
        return np.tile(per_col, self.cols)

    @cached_property
    def columns(self) -> np.ndarray:
        return np.repeat(np.arange(self.cols), self.blocks_per_col)

    @cached_property
    def starts(self) -> np.ndarray:
        return np.tile(np.arange(self.blocks_per_col) * self.block_rows, self.cols)

    @property
    def blocks(self) -> list[tuple[int, int, int]]:
        """(column, starting row, length) for every block, in block order."""
        return list(zip(self.columns.tolist(), self.starts.tolist(), self.lengths.tolist()))

    def _padded(self, w: np.ndarray) -> np.ndarray:
        pad = self.blocks_per_col * self.block_rows - self.rows
        if pad:
            w = np.concatenate([w, np.zeros((pad, self.cols), dtype=w.dtype)], axis=0)
        return w.reshape(self.blocks_per_col, self.block_rows, self.cols)

    def block_norms(self, w: np.ndarray) -> np.ndarray:
        """L2 norm of every block, shape ``(n_blocks,)``, in block order."""
        if w.shape != self.shape:
            raise ValueError(f"partition for {self.shape} applied to matrix {w.shape}")
        sq = np.square(self._padded(w)).sum(axis=1)  # (blocks_per_col, cols)
        return np.sqrt(sq.T.reshape(-1))

    def expand(self, per_block: np.ndarray) -> np.ndarray:
        """Broadcast one value per block to the full ``rows x cols`` matrix."""
        per_block = np.asarray(per_block)
        if per_block.shape != (self.n_blocks,):
            raise ValueError(f"expected {self.n_blocks} block values, got {per_block.shape}")
        grid = per_block.reshape(self.cols, self.blocks_per_col).T
        return np.repeat(grid, self.block_rows, axis=0)[: self.rows]


def partition_blocks(layer_shape: tuple[int, int]) -> BlockPartition:
    rows, cols = layer_shape
    return BlockPartition(int(rows), int(cols))


def block_scores(weights: np.ndarray, partition: BlockPartition) -> np.ndarray:
    """Pruning score of each block: its L2 norm."""
    return partition.block_norms(np.asarray(weights))


@dataclass
class Mask:
    """Per-layer keep bits over blocks (True = block survives).

    ``meta`` carries free-form labels such as ``language`` and ``source``.
    """

    partitions: dict[str, BlockPartition]
    bits: dict[str, np.ndarray]
    meta: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.partitions) != set(self.bits):
            raise ValueError("mask bits and partitions name different layers")
        for name, part in self.partitions.items():
            b = np.asarray(self.bits[name], dtype=bool)
            if b.shape != (part.n_blocks,):
                raise ValueError(f"layer {name}: {b.shape} bits for {part.n_blocks} blocks")
            self.bits[name] = b
        self._expanded: dict[str, np.ndarray] = {}

    @classmethod
    def ones(cls, partitions: Mapping[str, BlockPartition], **meta) -> "Mask":
        parts = dict(partitions)
        return cls(parts, {n: np.ones(p.n_blocks, dtype=bool) for n, p in parts.items()}, dict(meta))

    @classmethod
    def zeros(cls, partitions: Mapping[str, BlockPartition], **meta) -> "Mask":
        parts = dict(partitions)
        return cls(parts, {n: np.zeros(p.n_blocks, dtype=bool) for n, p in parts.items()}, dict(meta))

    def copy(self, **meta) -> "Mask":
        return Mask(dict(self.partitions), {n: b.copy() for n, b in self.bits.items()},
                    {**self.meta, **meta})

    @property
    def layers(self) -> list[str]:
        return list(self.partitions)

    def __iter__(self) -> Iterator[str]:
        return iter(self.partitions)

    def expanded(self, name: str) -> np.ndarray:
        """Elementwise boolean keep-matrix of one layer (cached)."""
        cached = self._expanded.get(name)
        if cached is None or cached.shape != self.partitions[name].shape:
            cached = self.partitions[name].expand(self.bits[name])
            self._expanded[name] = cached
        return cached

    def invalidate(self) -> None:
        self._expanded.clear()

    def layer_sparsity(self, name: str) -> float:
        part = self.partitions[name]
        kept = int(part.lengths[self.bits[name]].sum())
        return 1.0 - kept / part.size

    def sparsity(self) -> float:
        total = sum(p.size for p in self.partitions.values())
        kept = sum(int(p.lengths[self.bits[n]].sum()) for n, p in self.partitions.items())
        return 1.0 - kept / total

    def density(self) -> float:
        return 1.0 - self.sparsity()

    def flat(self) -> np.ndarray:
        """Elementwise keep vector over all layers, concatenated in layer order."""
        return np.concatenate([self.expanded(n).reshape(-1) for n in self.partitions])

    def same_layout(self, other: "Mask") -> bool:
        return list(self.partitions.items()) == list(other.partitions.items())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask) or not self.same_layout(other):
            return False
        return all(np.array_equal(self.bits[n], other.bits[n]) for n in self.partitions)

    def hamming(self, other: "Mask") -> int:
        if not self.same_layout(other):
            raise ValueError("masks have different layouts")
        return int(sum((self.bits[n] != other.bits[n]).sum() for n in self.partitions))

    def is_subset_of(self, other: "Mask") -> bool:
        return all(not np.any(self.bits[n] & ~other.bits[n]) for n in self.partitions)
