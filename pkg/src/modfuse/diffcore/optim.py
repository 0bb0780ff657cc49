"""First-order optimizer used by every training phase."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias correction over a fixed, registered parameter set.

    One instance exists per phase-updated group set; moment buffers and
    the step counter persist across iterations. `step` touches exactly
    the registered tensors and zeroes their gradients afterwards, so
    gradient flow between interleaved phases stays explicit.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:  # also rejects NaN
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} has no gradient; backward not run?")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def optimizer_step(state: Adam, params: list[Tensor]):
    """Apply one Adam update; `params` must equal the registered set."""
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ContractError("optimizer_step: params differ from the registered set")
    state.step()
