from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dhal.errors import ContractError
from dhal.nn.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Tensor], state: AdamState, max_grad_norm: float | None = None) -> None:
    """One bias-corrected Adam update in place. Gradients are left untouched.

    If ``max_grad_norm`` is given, the joint gradient is rescaled to at most
    that L2 norm before the update.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    scale = 1.0
    if max_grad_norm is not None:
        norm = np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
        if norm > max_grad_norm:
            scale = max_grad_norm / (norm + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p in params:
        g = p.grad * scale if scale != 1.0 else p.grad
        key = p.name if p.name is not None else id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[key]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[key] = m
        state.v[key] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


class Adam:
    """Convenience wrapper binding a parameter list to its state."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, max_grad_norm: float | None = None, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)
        self.max_grad_norm = max_grad_norm

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, self.state, self.max_grad_norm)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
