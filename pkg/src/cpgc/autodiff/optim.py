from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cpgc.autodiff.tensor import Tensor
from cpgc.errors import ContractError


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads count as zero."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ContractError("adam_step: params, grads and state lengths differ")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step_size = state.learning_rate / (1.0 - b1 ** t)
    root_bc2 = np.sqrt(1.0 - b2 ** t)
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.data.shape:
            raise ContractError(f"adam_step: state shape {m.shape} != param shape {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ContractError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom /= root_bc2
        denom += state.epsilon
        p.data -= step_size * (m / denom)


@dataclass
class Adam:
    """Adam over a fixed parameter list, reading gradients from ``.grad``."""

    params: list[Tensor]
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(self.params, learning_rate=self.learning_rate,
                                          beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
