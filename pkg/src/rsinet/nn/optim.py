"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

DEFAULT_LR = 1e-4


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class MissingGradientError(RuntimeError):
    pass


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One Adam update in place; gradients are cleared afterwards."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {missing[:5]}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


class Adam:
    """Binds a parameter dict to an :class:`AdamState`."""

    def __init__(self, params: dict[str, Tensor], lr: float = DEFAULT_LR, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
