"""Dual-graph attention: two-graph GConv, feature/context attention blocks, per-gender EMA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import DualGraph
from .nn import Module, kaiming_uniform, zeros_param
from .tensor import Tensor

OUTPUT_ACTIVATIONS = ("sigmoid", "identity")


class GConvLayer(Module):
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, bias: bool = True):
        if f_in <= 0 or f_out <= 0:
            raise ValueError(f"GConv widths must be positive, got {f_in}->{f_out}")
        self.f_in, self.f_out = f_in, f_out
        self.W1 = kaiming_uniform(rng, (f_in, f_out), f_in)
        self.W2 = kaiming_uniform(rng, (f_in, f_out), f_in)
        self.b1 = zeros_param((f_out,)) if bias else None
        self.b2 = zeros_param((f_out,)) if bias else None

    def forward(self, x: Tensor, L1: np.ndarray, L2: np.ndarray) -> Tensor:
        return gconv(x, L1, L2, self)


def gconv(x: Tensor, L1, L2, layer: GConvLayer) -> Tensor:
    """0.5 * sum_j (L_j X W_j + b_j) on (N, f) or (batch, N, f) node features."""
    x = T.as_tensor(x)
    N = x.shape[-2]
    for L in (L1, L2):
        if np.shape(L) != (N, N):
            raise T.ShapeError("gconv", f"propagation matrix {np.shape(L)} does not match {N} nodes")
    if x.shape[-1] != layer.f_in:
        raise T.ShapeError("gconv", f"node features have width {x.shape[-1]}, layer expects {layer.f_in}")
    h1 = T.Tensor(L1) @ x @ layer.W1
    h2 = T.Tensor(L2) @ x @ layer.W2
    if layer.b1 is not None:
        h1 = h1 + layer.b1
        h2 = h2 + layer.b2
    return (h1 + h2) * 0.5


class AttentionBlock(Module):
    """Stacked GConvs, ReLU between layers, bounded output."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, output: str = "sigmoid"):
        if len(widths) < 2:
            raise ValueError("attention block needs at least one GConv layer")
        if output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"output activation must be one of {OUTPUT_ACTIVATIONS}")
        self.widths = tuple(int(w) for w in widths)
        self.output = output
        self.layers = [GConvLayer(a, b, rng) for a, b in zip(self.widths[:-1], self.widths[1:])]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def forward(self, x: Tensor, graphs: DualGraph) -> Tensor:
        L1, L2 = graphs.propagation
        for k, layer in enumerate(self.layers):
            x = layer(x, L1, L2)
            if k < len(self.layers) - 1:
                x = T.relu(x)
        return T.sigmoid(x) if self.output == "sigmoid" else x


def pab_attention(x: Tensor, graphs: DualGraph, block: AttentionBlock) -> Tensor:
    """Feature attention of the same size as the node features."""
    if block.out_width != x.shape[-1]:
        raise T.ShapeError("pab_attention", f"block outputs width {block.out_width}, features have {x.shape[-1]}")
    return block(x, graphs)


def cab_attention(x: Tensor, graphs: DualGraph, block: AttentionBlock) -> Tensor:
    """One context weight per node."""
    if block.out_width != 1:
        raise T.ShapeError("cab_attention", f"context block must output width 1, got {block.out_width}")
    return block(x, graphs)


def node_average(att: Tensor) -> Tensor:
    """Replace every row (node) by the mean row; shape is unchanged."""
    avg = att.mean(axis=-2, keepdims=True)
    return avg + Tensor(np.zeros(att.shape))


def apply_attention(x: Tensor, scores: Tensor, feature_map, context_map):
    """Hadamard products: (X*, S*) = (Att_X ⊙ X, context ⊙ S)."""
    x_star = x * feature_map if feature_map is not None else x
    s_star = scores * context_map if context_map is not None else scores
    return x_star, s_star


class EmaModeError(RuntimeError):
    pass


@dataclass
class EmaState:
    """Per-gender running context-attention map, (N, 1) each."""

    theta: float = 0.01
    maps: dict[int, np.ndarray] = field(default_factory=dict)

    def initialized(self, gender: int) -> bool:
        return int(gender) in self.maps

    def get(self, gender: int) -> np.ndarray:
        g = int(gender)
        if g not in self.maps:
            raise EmaModeError(f"context attention for gender {g} was never learned; train with that gender first")
        return self.maps[g]


def ema_update(state: EmaState, gender: int, batch_attentions, training: bool = True) -> EmaState:
    """Blend the batch-mean context map of ``gender`` into the running map.

    The first update for a gender copies the batch mean.
    """
    if not training:
        raise EmaModeError("context-attention EMA can only be updated in training mode")
    batch = np.asarray([np.asarray(a, dtype=np.float64) for a in batch_attentions])
    if batch.size == 0:
        return state
    batch_mean = batch.mean(axis=0)
    g = int(gender)
    if g not in state.maps:
        state.maps[g] = batch_mean.copy()
    else:
        state.maps[g] = (1.0 - state.theta) * state.maps[g] + state.theta * batch_mean
    return state
