"""SGD with momentum and coupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class SgdState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "SgdState":
        state = cls(**hyper)
        state.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
        return state


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: SgdState) -> None:
    """In place: v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    if set(state.velocity) != set(params):
        raise ContractError("optimizer velocity buffers do not match the parameter set")
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ContractError("missing gradient for parameters: " + ", ".join(missing))
    for name, p in params.items():
        v = state.velocity[name]
        v *= state.momentum
        v += grads[name]
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data = p.data - state.lr * v


def grads_of(params: Mapping[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {name: p.grad for name, p in params.items()}
