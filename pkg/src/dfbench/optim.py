"""First-order optimizers: SGD with momentum and Adam.

``optimizer_step`` is a pure function from (params, grads, state, config)
to new params and state; the ``Optimizer`` class wraps it around a list of
tensors for use in training loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteValues, ShapeMismatch, Tensor

KINDS = ("sgd-momentum", "adam")


@dataclass
class OptimizerConfig:
    kind: str = "sgd-momentum"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind '{self.kind}'; expected one of {KINDS}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class OptimizerState:
    step: int = 0
    v: list = field(default_factory=list)  # momentum buffer / Adam first moment
    w: list = field(default_factory=list)  # Adam second moment


def init_state(params: list[np.ndarray], config: OptimizerConfig) -> OptimizerState:
    state = OptimizerState()
    state.v = [np.zeros_like(p) for p in params]
    if config.kind == "adam":
        state.w = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimizerState | None,
    config: OptimizerConfig,
) -> tuple[list[np.ndarray], OptimizerState]:
    """One update step. Returns fresh arrays; inputs are left untouched.

    sgd-momentum: v <- mu*v + g, p <- p - lr*v.
    adam: standard bias-corrected first/second moment update.
    """
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.isfinite(np.sum(g)):
            raise NonFiniteValues("optimizer received a non-finite gradient")
    if state is None:
        state = init_state(params, config)

    lr = config.learning_rate
    new_params: list[np.ndarray] = []
    new_state = OptimizerState(step=state.step + 1)
    if config.kind == "sgd-momentum":
        mu = config.momentum
        for p, g, v in zip(params, grads, state.v):
            v_new = mu * v + g
            new_params.append(p - lr * v_new)
            new_state.v.append(v_new)
    else:
        b1, b2, eps = config.beta1, config.beta2, config.epsilon
        t = new_state.step
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(params, grads, state.v, state.w):
            m_new = b1 * m + (1.0 - b1) * g
            v_new = b2 * v + (1.0 - b2) * g * g
            update = (m_new / c1) / (np.sqrt(v_new / c2) + eps)
            new_params.append(p - lr * update)
            new_state.v.append(m_new)
            new_state.w.append(v_new)
    return new_params, new_state


class Optimizer:
    """Stateful wrapper stepping a fixed list of parameter tensors."""

    def __init__(self, params: list[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.state = init_state([p.data for p in self.params], config)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for p in self.params:
            grads.append(np.zeros_like(p.data) if p.grad is None else p.grad)
        new_data, self.state = optimizer_step([p.data for p in self.params], grads, self.state, self.config)
        for p, d in zip(self.params, new_data):
            p.data = d
