"""Adam with bias-corrected moment estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StateError
from .core import Tensor


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-3


@dataclass
class Adam:
    """Adam over a fixed, ordered list of parameter tensors.

    Updates happen in place on ``param.data``.  Gradients are left as they
    are; the caller zeroes them between steps.  A parameter whose ``grad`` is
    ``None`` is treated as having a zero gradient.
    """

    params: list[Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.state = AdamState(
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            learning_rate=self.learning_rate,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


def adam_step(params: list[Tensor], state: AdamState) -> None:
    if len(params) != len(state.first_moment) or len(params) != len(state.second_moment):
        raise StateError(f"optimizer tracks {len(state.first_moment)} tensors, got {len(params)}")
    for i, p in enumerate(params):
        if state.first_moment[i].shape != p.shape or state.second_moment[i].shape != p.shape:
            raise StateError(f"parameter {i} has shape {p.shape}, moments have {state.first_moment[i].shape}")
        if p.grad is not None and p.grad.shape != p.shape:
            raise StateError(f"parameter {i} gradient shape {p.grad.shape} differs from {p.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if p.grad is None:
            g = np.zeros_like(p.data)
        else:
            g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
