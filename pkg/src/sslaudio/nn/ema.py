"""Exponential moving average of model weights (the teacher in MT)."""

from __future__ import annotations

import copy

from ..errors import ContractError


class EmaWeights:
    """Shadow model whose state is W_t = alpha * W_{t-1} + (1 - alpha) * w_t.

    The shadow covers parameters and batch-norm running statistics alike,
    so it can be evaluated as a standalone model.  ``update`` is called
    once per minibatch iteration.
    """

    def __init__(self, model, alpha: float):
        if not (0.0 <= alpha < 1.0):
            raise ContractError("alpha_ema must satisfy 0 <= alpha < 1")
        self.alpha = alpha
        self.model = copy.deepcopy(model)
        for p in self.model.parameters():
            p.grad = None

    def update(self, student):
        a = self.alpha
        shadow_params = dict(self.model.named_parameters())
        for name, p in student.named_parameters():
            sp = shadow_params.get(name)
            if sp is None or sp.data.shape != p.data.shape:
                raise ContractError(f"teacher/student mismatch at {name}")
            sp.data = a * sp.data + (1.0 - a) * p.data
        shadow_state = dict(self.model.named_buffers())
        for name, b in student.named_buffers():
            owner, attr = self.model._locate_buffer(name)
            setattr(owner, attr, a * shadow_state[name] + (1.0 - a) * b)
