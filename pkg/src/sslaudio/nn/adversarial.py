"""Fast gradient sign method on model inputs."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .functional import cross_entropy, softmax
from .layers import frozen_bn_stats
from .tensor import Tensor, backward


def fgsm(model, x: np.ndarray, target_probs: np.ndarray, epsilon: float) -> np.ndarray:
    """x + epsilon * sign(grad_x CE(softmax(f(x)), target)).

    The backward pass is input-only: parameter ``grad`` fields are never
    touched, and batch-norm running statistics are frozen for the probe
    forward.
    """
    if epsilon < 0:
        raise ContractError("epsilon must be >= 0")
    xt = Tensor(np.asarray(x), requires_grad=True)
    with frozen_bn_stats():
        loss = cross_entropy(softmax(model(xt)), np.asarray(target_probs))
    gx = backward(loss, inputs=[xt]).get(xt)
    if gx is None:
        raise ContractError("loss does not depend on the input")
    return np.asarray(x) + epsilon * np.sign(gx).astype(np.asarray(x).dtype, copy=False)
