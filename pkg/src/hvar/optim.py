"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.005
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Holds an :class:`OptimizerState` for a fixed list of parameters.

    Weight decay is applied to the parameter before the moment update
    (``p <- p * (1 - lr * wd)``), matching the decoupled formulation.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.95), weight_decay: float = 0.005,
                 eps: float = 1e-8, no_decay: set[str] | None = None):
        self.params: list[Parameter] = list(params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), weight_decay=weight_decay, eps=eps)
        self.no_decay = no_decay or set()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        optimizer_step(self.params, self.state, self.no_decay)


def optimizer_step(params, state: OptimizerState, no_decay: set[str] = frozenset()) -> None:
    """One AdamW update over every trainable parameter in ``params``."""
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.grad is None:
            raise MissingGradientError(f"trainable parameter {p.name or p.shape} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in trainable:
        key = id(p)
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(p.data)
            state.second_moment[key] = np.zeros_like(p.data)
        v = state.second_moment[key]
        if state.weight_decay and p.name not in no_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
