"""Differentiable losses and probability utilities.

All losses operate on probability vectors [C] or batches [B, C]; batched
inputs are averaged over the batch.  Logs are clamped at ``PROB_EPS`` so
one-hot or sharpened targets can never produce NaN.  Entropies and the
divergence use natural logarithms.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, add, clamp_min, exp, log, mul, sub, tmean, tsum

PROB_EPS = 1e-7


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def softmax(logits):
    """Row-wise softmax, shift-stabilized (max subtracted as a constant)."""
    shift = _data(logits).max(axis=-1, keepdims=True)
    e = exp(logits - shift)
    return e / tsum(e, axis=-1, keepdims=True)


def _row_mean(per_row):
    if per_row.data.ndim == 0:
        return per_row
    return tmean(per_row)


def cross_entropy(pred_probs, target_probs):
    """CE(p, t) = -sum_c t_c log p_c, averaged over the batch.

    Accepts soft targets; ``target_probs`` may be a plain array (treated
    as a constant) or a Tensor (gradient flows into the target slot too).
    """
    logp = log(clamp_min(pred_probs, PROB_EPS))
    per_row = -tsum(mul(target_probs, logp), axis=-1)
    return _row_mean(per_row)


def entropy(p):
    """Shannon entropy in nats; batched input returns the batch mean."""
    logp = log(clamp_min(p, PROB_EPS))
    per_row = -tsum(mul(p, logp), axis=-1)
    return _row_mean(per_row)


def mse(p, q):
    """Mean squared error over all elements."""
    d = sub(p, q)
    return tmean(mul(d, d))


def _validate_distribution(x, name):
    d = _data(x)
    if np.any(d < -1e-6):
        raise ContractError(f"{name} has negative mass")
    sums = d.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ContractError(f"{name} rows do not sum to 1")


def js_divergence(p, q):
    """Jensen-Shannon divergence H((p+q)/2) - (H(p)+H(q))/2, batch-averaged.

    Symmetric in (p, q) and bounded by ln 2.
    """
    _validate_distribution(p, "p")
    _validate_distribution(q, "q")
    m = mul(add(p, q), 0.5)
    return entropy(m) - mul(add(entropy(p), entropy(q)), 0.5)


# ---------------------------------------------------------------------------
# plain-array helpers (pseudo-label plumbing, evaluation)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out.reshape(*labels.shape, n_classes)
