"""Plain gradient descent and Adam over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mgf.autodiff.params import ParamVector
from mgf.errors import ConfigError


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


def make_optimizer(kind: str, lr: float, **kw) -> OptimizerState:
    return OptimizerState(kind=kind, lr=lr, **kw)


def optimizer_step(state: OptimizerState, params: ParamVector, grads: ParamVector) -> None:
    params.check_structure(grads)
    g = grads.values
    state.step += 1
    if state.kind == "sgd":
        params.values -= state.lr * g
        return
    if state.m is None:
        state.m = np.zeros_like(params.values)
        state.v = np.zeros_like(params.values)
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
