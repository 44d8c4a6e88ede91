"""Functional Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from corrolab.errors import DimensionMismatch, NonFiniteError
from corrolab.numcore.params import ParamVector


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    beta1: float
    beta2: float
    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0,1), got {self.beta1}, {self.beta2}")
        if self.step_count < 0:
            raise ValueError("step_count must be nonnegative")
        if self.first_moment.shape != self.second_moment.shape:
            raise DimensionMismatch("moment arrays", self.first_moment.shape, self.second_moment.shape)


def init_adam(n, learning_rate=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return AdamState(
        first_moment=np.zeros(n),
        second_moment=np.zeros(n),
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(state, params, grads):
    """One bias-corrected update. Returns new (params, state); inputs untouched."""
    g = grads.values
    if len(params) != len(g):
        raise DimensionMismatch("gradient length", len(params), len(g))
    if state.first_moment.size != len(params):
        raise DimensionMismatch("moment length", len(params), state.first_moment.size)
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        name = _entry_name(grads, bad)
        raise NonFiniteError(f"gradient entry {bad} ({name})")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params.with_values(new_values), replace(state, first_moment=m, second_moment=v, step_count=t)


def _entry_name(pv, flat_index):
    offset = 0
    for name, shape in pv.layout:
        size = int(np.prod(shape)) if shape else 1
        if flat_index < offset + size:
            return name
        offset += size
    return "?"


class AdamOptimizer:
    """Mutable convenience wrapper used by training loops."""

    def __init__(self, params, learning_rate=3e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.state = init_adam(len(params), learning_rate, beta1, beta2, epsilon)

    def update(self, params, grads):
        new_params, self.state = adam_step(self.state, params, grads)
        return new_params
