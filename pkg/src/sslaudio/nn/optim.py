"""ADAM optimizer and the cosine learning-rate rule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def cosine_lr(t: int, total_epochs: int, base_lr: float) -> float:
    """Descending cosine: base_lr * 0.5 * (1 + cos((t - 1) * pi / e)).

    ``t`` is the 1-based epoch index; the rule starts at base_lr and
    decays monotonically toward ~0 at the final epoch.
    """
    if not (1 <= t <= total_epochs):
        raise ContractError(f"epoch {t} outside [1, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos((t - 1) * math.pi / total_epochs))


class Adam:
    """Standard ADAM with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    ``lr`` is a plain attribute; schedules assign it before each step.
    Optional decoupled-style weight decay is applied as an L2 gradient
    term (default 0, matching the training setups used here).
    """

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(named_params)
        seen = set()
        for name, p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ContractError(f"{name} is not a trainable tensor")
            if name in seen:
                raise ContractError(f"duplicate parameter name {name}")
            seen.add(name)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        state = {"t": self.t}
        for name in self.m:
            state[f"m:{name}"] = np.array(self.m[name], copy=True)
            state[f"v:{name}"] = np.array(self.v[name], copy=True)
        return state

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for name in self.m:
            self.m[name] = np.array(state[f"m:{name}"], copy=True)
            self.v[name] = np.array(state[f"v:{name}"], copy=True)
        return self
