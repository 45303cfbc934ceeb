"""Group-shared ROI scoring head and the random-grouping baseline."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Linear, Module
from .tensor import Tensor

BN_MODES = ("joint", "batch")


class ScoreBlock(Module):
    """Stack of per-position affine layers with batch norm and ReLU, ending in one scalar."""

    def __init__(self, in_features: int, hidden: Sequence[int], rng: np.random.Generator):
        widths = [in_features, *hidden]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [BatchNorm(b) for b in widths[1:]]
        self.out = Linear(widths[-1], 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        for layer, norm in zip(self.layers, self.norms):
            x = T.relu(norm(layer(x)))
        return self.out(x)


class GroupHead(Module):
    """One :class:`ScoreBlock` per group; every ROI is scored by its group's block.

    ``bn_mode="joint"`` normalizes over batch x ROIs-in-group together;
    ``"batch"`` normalizes each ROI over the batch alone (shared running statistics).
    """

    def __init__(self, assignment: Sequence[int], in_features: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (32, 16), bn_mode: str = "joint"):
        assignment = np.asarray(assignment, dtype=np.int64)
        n_groups = int(assignment.max()) + 1
        if sorted(set(assignment.tolist())) != list(range(n_groups)):
            raise ValueError(f"group assignment must use every index 0..{n_groups - 1}")
        if bn_mode not in BN_MODES:
            raise ValueError(f"bn_mode must be one of {BN_MODES}")
        self.assignment = assignment
        self.in_features = in_features
        self.bn_mode = bn_mode
        self.blocks = [ScoreBlock(in_features, hidden, rng) for _ in range(n_groups)]
        self._members = [np.flatnonzero(assignment == g) for g in range(n_groups)]
        order = np.concatenate(self._members)
        self._inverse = np.argsort(order)

    @property
    def n_groups(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor) -> Tensor:
        """(batch, N, f) -> (batch, N) scores."""
        if x.ndim != 3 or x.shape[2] != self.in_features:
            raise T.ShapeError("agconv_scores", f"expected (batch, N, {self.in_features}), got {x.shape}")
        if x.shape[1] != len(self.assignment):
            raise T.ShapeError("agconv_scores", f"expected {len(self.assignment)} ROIs, got {x.shape[1]}")
        B = x.shape[0]
        parts = []
        for block, idx in zip(self.blocks, self._members):
            if self.bn_mode == "joint":
                xg = x[:, idx, :].reshape(B * len(idx), self.in_features)
                parts.append(block(xg).reshape(B, len(idx)))
            else:
                cols = [block(x[:, n, :]) for n in idx]
                parts.append(T.concat(cols, axis=1))
        return T.concat(parts, axis=1)[:, self._inverse]


def agconv_scores(x: Tensor, head: GroupHead) -> Tensor:
    return head(x)


def random_grouping(seed: int, n_groups: int = 4, n_rois: int = 17) -> np.ndarray:
    """Seeded assignment of ``n_rois`` ROIs to ``n_groups`` non-empty groups."""
    if n_groups < 1 or n_groups > n_rois:
        raise ValueError(f"n_groups must be in [1, {n_rois}], got {n_groups}")
    perm = np.random.default_rng(seed).permutation(n_rois)
    assignment = np.empty(n_rois, dtype=np.int64)
    assignment[perm] = np.arange(n_rois) % n_groups
    return assignment
