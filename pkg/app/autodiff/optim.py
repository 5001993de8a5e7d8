"""
SGD and adaptive-moment (Adam) updates over a list of parameter tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np

from app.autodiff.tensor import Tensor
from app.errors import ConfigError, DimensionError, DivergedTrainingError

OptimizerKind = Literal["sgd", "adam"]


@dataclass
class OptimizerState:
    learning_rate: float
    kind: OptimizerKind = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moments: List[np.ndarray] = field(default_factory=list)
    second_moments: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer: {self.kind}")


def make_optimizer(params: Sequence[Tensor], learning_rate: float,
                   kind: OptimizerKind = "adam") -> OptimizerState:
    state = OptimizerState(learning_rate=learning_rate, kind=kind)
    if kind == "adam":
        state.first_moments = [np.zeros_like(p.values) for p in params]
        state.second_moments = [np.zeros_like(p.values) for p in params]
    return state


def optimizer_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
                   state: OptimizerState) -> Sequence[Tensor]:
    """
    In-place update of params. A missing gradient counts as zero.
    Raises DivergedTrainingError (with the attempted step number) on NaN/inf.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} gradients")
    attempted = state.step_count + 1
    dense = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.values) if g is None else np.asarray(g)
        if g.shape != p.values.shape:
            raise DimensionError("gradient does not match its parameter", g.shape, p.values.shape)
        if not np.all(np.isfinite(g)):
            raise DivergedTrainingError("non-finite gradient", step=attempted)
        dense.append(g)

    if state.kind == "sgd":
        for p, g in zip(params, dense):
            p.values -= state.learning_rate * g
    else:
        if not state.first_moments:
            state.first_moments = [np.zeros_like(p.values) for p in params]
            state.second_moments = [np.zeros_like(p.values) for p in params]
        t = attempted
        b1, b2 = state.beta1, state.beta2
        for i, (p, g) in enumerate(zip(params, dense)):
            m = state.first_moments[i]
            v = state.second_moments[i]
            if m.shape != p.values.shape:
                raise DimensionError("moment buffer does not match its parameter", m.shape, p.values.shape)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.values -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)

    state.step_count = attempted
    return params


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
