"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import NonFiniteError, ParameterError, ShapeError
from .tensor import DiffTensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves both the parameters and the moments unchanged.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float32) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float32) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape}, gradient {g.shape}, moment {state.m[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i}; update rejected")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g64 = g.astype(np.float64)
        m = b1 * state.m[i] + (1 - b1) * g64
        v = b2 * state.v[i] + (1 - b2) * g64 * g64
        state.m[i] = m.astype(np.float32)
        state.v[i] = v.astype(np.float32)
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        out.append((p - update).astype(p.dtype))
    return out


class Adam:
    """Optimizer over a fixed list of :class:`DiffTensor` parameters."""

    def __init__(self, params: Sequence[DiffTensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, value in zip(self.params, new):
            p.data = value
