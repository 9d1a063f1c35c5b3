"""Parameter containers for the layers the networks are built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from ..errors import ShapeError
from . import functional as F
from .tensor import DiffTensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> DiffTensor:
    bound = np.sqrt(1.0 / fan_in)
    return DiffTensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> DiffTensor:
    return DiffTensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal module tree: parameters, buffers, children and a mode flag.

    Parameters are any :class:`DiffTensor` attributes with ``requires_grad``;
    children are :class:`Module` attributes. Both are discovered in attribute
    assignment order, which gives stable, human-readable dotted names.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffTensor]]:
        for name, value in vars(self).items():
            if isinstance(value, DiffTensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[DiffTensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        head, _, rest = name.partition(".")
        getattr(self, head)._set_buffer(rest, value)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        if strict:
            missing = (set(params) | set(buffers)) - set(state)
            unexpected = set(state) - (set(params) | set(buffers))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(value.shape):
                    raise ShapeError(f"{name}: expected shape {p.shape}, got {tuple(value.shape)}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in buffers:
                if buffers[name].shape != tuple(value.shape):
                    raise ShapeError(f"{name}: expected shape {buffers[name].shape}, got {tuple(value.shape)}")
                self._set_buffer(name, np.array(value, dtype=np.float32))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, *, rng):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = F._pair(kernel_size)
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)
        kh, kw = self.kernel_size
        self.weight = uniform_init(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw)
        self.bias = zeros_param(out_channels)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def describe(self) -> dict:
        return {"kind": "conv2d", "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel_size, "stride": self.stride, "padding": self.padding}


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, output_padding=0, *, rng):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = F._pair(kernel_size)
        self.stride = F._pair(stride)
        self.padding = F._pair(padding)
        self.output_padding = F._pair(output_padding)
        kh, kw = self.kernel_size
        self.weight = uniform_init(rng, (in_channels, out_channels, kh, kw), in_channels * kh * kw)
        self.bias = zeros_param(out_channels)

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)

    def describe(self) -> dict:
        return {"kind": "conv_transpose2d", "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel_size, "stride": self.stride, "padding": self.padding,
                "output_padding": self.output_padding}


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, *, rng):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight = uniform_init(rng, (out_channels, in_channels, self.kernel_size), in_channels * self.kernel_size)
        self.bias = zeros_param(out_channels)

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def describe(self) -> dict:
        return {"kind": "conv1d", "in": self.in_channels, "out": self.out_channels,
                "kernel": (self.kernel_size,), "stride": (self.stride,), "padding": (self.padding,)}


class BatchNorm(Module):
    """Batch normalization over every axis except the channel axis."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.state = F.BatchNormState.create(channels, momentum, eps)
        self.gamma = self.state.gamma
        self.beta = self.state.beta

    def forward(self, x):
        self.state.training = self.training
        return F.batch_norm(x, self.state)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def _set_buffer(self, name, value):
        setattr(self.state, name, value)


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduction: int = 8, *, rng):
        hidden = F.se_hidden(channels, reduction)
        self.channels, self.hidden, self.reduction = channels, hidden, reduction
        self.w1 = uniform_init(rng, (hidden, channels), channels)
        self.b1 = zeros_param(hidden)
        self.w2 = uniform_init(rng, (channels, hidden), hidden)
        self.b2 = zeros_param(channels)

    def forward(self, x):
        return F.squeeze_excite(x, self.w1, self.b1, self.w2, self.b2)
