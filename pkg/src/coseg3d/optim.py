"""Adam with bias correction, one state object per parameter tensor."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamState", "adam_step", "Adam"]


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, learning_rate: float = 1e-3,
                  beta1: float = 0.9, beta2: float = 0.999,
                  epsilon: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(param.data),
            second_moment=np.zeros_like(param.data),
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )

    def validate(self, param: Tensor) -> None:
        if self.first_moment.size != param.data.size or self.second_moment.size != param.data.size:
            raise ValueError("AdamState accumulators do not match parameter size")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("Adam epsilon must be positive")
        if self.step_count < 0:
            raise ValueError("Adam step_count must be non-negative")


def adam_step(param: Tensor, state: AdamState) -> None:
    """One in-place Adam update; clears the parameter's gradient afterward."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no gradient")
    state.validate(param)
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    param.data = param.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.grad = None


@dataclass
class Adam:
    """Convenience wrapper stepping a list of parameters together."""

    params: Sequence[Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.states = [
            AdamState.for_param(p, self.learning_rate, self.beta1, self.beta2, self.epsilon)
            for p in self.params
        ]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is not None:
                adam_step(p, s)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
