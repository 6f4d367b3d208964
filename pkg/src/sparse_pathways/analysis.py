"""Overlap statistics for sets of language masks: pairwise IOU and union ratio.

All counts are taken over individual weights (each block bit weighted by its
block length), so shorter remainder blocks do not skew the ratios.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .blocks import Mask

STATS_HEADER = ["mask_set", "row_type", "mask_a", "mask_b", "iou", "union_ratio", "num_masks",
                "sparsity_per_mask"]


class EmptyMaskError(ValueError):
    """IOU of two masks that both keep nothing is undefined."""


def _check_layout(masks: Sequence[Mask], names: Sequence[str] | None = None) -> None:
    first = masks[0]
    for i, m in enumerate(masks[1:], start=1):
        if not first.same_layout(m):
            a = names[0] if names else "mask 0"
            b = names[i] if names else f"mask {i}"
            raise ValueError(f"mask shapes differ: {a} vs {b}")


def iou(m_i: Mask, m_j: Mask) -> float:
    _check_layout([m_i, m_j])
    inter = 0
    union = 0
    for name, part in m_i.partitions.items():
        a = m_i.bits[name]
        b = m_j.bits[name]
        inter += int(part.lengths[a & b].sum())
        union += int(part.lengths[a | b].sum())
    if union == 0:
        raise EmptyMaskError("IOU of two empty masks is undefined")
    return inter / union


def union_ratio(masks: Sequence[Mask]) -> float:
    """Weights kept by at least one mask over all prunable weights."""
    if not masks:
        raise ValueError("union_ratio needs at least one mask")
    _check_layout(masks)
    kept = 0
    size = 0
    for name, part in masks[0].partitions.items():
        u = np.zeros(part.n_blocks, dtype=bool)
        for m in masks:
            u |= m.bits[name]
        kept += int(part.lengths[u].sum())
        size += part.size
    return kept / size


@dataclass
class MaskStats:
    names: list[str]
    iou: np.ndarray
    union_ratio: float
    sparsity: dict[str, float]
    layer_sparsity: dict[str, dict[str, float]]

    def pairs(self) -> list[tuple[str, str, float]]:
        return [(self.names[i], self.names[j], float(self.iou[i, j]))
                for i, j in itertools.combinations(range(len(self.names)), 2)]

    def mean_pairwise_iou(self) -> float:
        return float(np.mean([v for _, _, v in self.pairs()]))

    def render(self, title: str = "") -> str:
        width = max(8, *(len(n) for n in self.names))
        lines = [title] if title else []
        lines.append("IOU".ljust(width) + "".join(n.rjust(width + 2) for n in self.names))
        for i, n in enumerate(self.names):
            lines.append(n.ljust(width) + "".join(f"{v:.4f}".rjust(width + 2) for v in self.iou[i]))
        lines.append(f"mean pairwise IOU: {self.mean_pairwise_iou():.4f}")
        lines.append(f"union ratio: {self.union_ratio:.4f}")
        for n in self.names:
            per_layer = ", ".join(f"{l}={s:.4f}" for l, s in self.layer_sparsity[n].items())
            lines.append(f"sparsity[{n}]: {self.sparsity[n]:.4f} ({per_layer})")
        return "\n".join(lines)

    def csv_rows(self, mask_set: str) -> list[list[str]]:
        rows = [[mask_set, "pair", a, b, f"{v:.6f}", "", "", ""] for a, b, v in self.pairs()]
        sp = ";".join(f"{n}={self.sparsity[n]:.6f}" for n in self.names)
        rows.append([mask_set, "summary", "", "", "", f"{self.union_ratio:.6f}", str(len(self.names)), sp])
        return rows


def stats_report(masks: Mapping[str, Mask]) -> MaskStats:
    names = list(masks)
    if len(names) < 2:
        raise ValueError("stats_report needs at least two masks")
    ms = [masks[n] for n in names]
    _check_layout(ms, names)
    k = len(ms)
    mat = np.eye(k)
    for i, j in itertools.combinations(range(k), 2):
        mat[i, j] = mat[j, i] = iou(ms[i], ms[j])
    return MaskStats(
        names=names,
        iou=mat,
        union_ratio=union_ratio(ms),
        sparsity={n: masks[n].sparsity() for n in names},
        layer_sparsity={n: {l: masks[n].layer_sparsity(l) for l in masks[n]} for n in names},
    )


def write_stats_csv(path, reports: Mapping[str, MaskStats]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for mask_set, stats in reports.items():
            w.writerows(stats.csv_rows(mask_set))
