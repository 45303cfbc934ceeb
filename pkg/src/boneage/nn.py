"""Layer primitives built on :mod:`boneage.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal container: parameters are grad-requiring Tensor attributes,
    buffers are numpy arrays listed in ``_buffers``."""

    training: bool = True
    _buffers: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif value.requires_grad:
                yield full, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.ShapeError("load_state_dict", f"{name}: {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=T.DTYPE)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Affine map on the last axis; equivalent to a 1x1 convolution over positions."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        if in_features <= 0 or out_features <= 0:
            raise ValueError(f"Linear widths must be positive, got {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.bias = zeros_param((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise T.ShapeError("linear", f"expected last dim {self.in_features}, got {x.shape}")
        out = x @ self.weight
        return out if self.bias is None else out + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        if in_channels <= 0 or out_channels <= 0:
            raise ValueError(f"Conv2d channels must be positive, got {in_channels}->{out_channels}")
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        self.bias = zeros_param((out_channels,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Per-channel batch normalization over every axis except axis 1.

    Inputs are (batch, channels) or (batch, channels, H, W). Running variance
    uses the unbiased batch estimate.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = zeros_param((num_features,))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[1] != self.num_features:
            raise T.ShapeError("batch_norm", f"expected channel axis 1 of size {self.num_features}, got {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, self.num_features) + (1,) * (x.ndim - 2)
        gamma = self.gamma.reshape(bshape)
        beta = self.beta.reshape(bshape)
        if not self.training:
            return T.normalize_affine(x, self.running_mean.reshape(bshape), self.running_var.reshape(bshape),
                                      gamma, beta, self.eps)
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        out, mu, var = T.batch_norm(x, gamma, beta, axes, self.eps)
        m = self.momentum
        self.running_mean *= 1.0 - m
        self.running_mean += m * mu.reshape(-1)
        self.running_var *= 1.0 - m
        self.running_var += m * var.reshape(-1) * count / (count - 1)
        return out
