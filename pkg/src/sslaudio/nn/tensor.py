"""Array-valued reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus the bookkeeping needed to replay the
chain rule: each op records, per differentiable parent, a closure that
maps the output gradient to that parent's gradient contribution.
``backward`` walks the graph once in reverse topological order.

Only what the training stack needs is implemented: elementwise algebra
with broadcasting, matmul, reductions, exp/log/relu/clamp, reshape and
concatenation, plus fused conv / pooling / batch-norm kernels in
``layers``.  Gradients are exact (no approximations); second-order
differentiation is intentionally unsupported.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, UnsupportedOperationError

_grad_enabled = True
_check_finite = False


@contextmanager
def no_grad():
    """Disable graph recording (pseudo-label and teacher passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_guard():
    """Raise as soon as any op produces a NaN or Inf (debugging hook)."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_vjps", "_backward_done")

    # Defer all ndarray-op-Tensor expressions to our reflected operators
    # instead of letting numpy build object arrays.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if requires_grad and not np.issubdtype(self.data.dtype, np.floating):
            raise ContractError("differentiable tensors must hold floats")
        self.grad = None
        self.requires_grad = requires_grad
        self._vjps = ()  # ((parent, fn), ...) recorded by ops
        self._backward_done = False

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, k):
        return pow_scalar(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def make_node(data: np.ndarray, vjps) -> Tensor:
    """Build an op output; ``vjps`` is ((parent, fn), ...) for Tensor parents."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op under finite_guard")
    out = Tensor(data)
    if _grad_enabled:
        recorded = tuple((p, fn) for p, fn in vjps if isinstance(p, Tensor) and p.requires_grad)
        if recorded:
            out._vjps = recorded
            out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes that broadcasting expanded to reach ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise algebra


def add(a, b):
    ad, bd = _as_data(a), _as_data(b)
    return make_node(ad + bd, (
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(g, bd.shape)),
    ))


def sub(a, b):
    ad, bd = _as_data(a), _as_data(b)
    return make_node(ad - bd, (
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(-g, bd.shape)),
    ))


def mul(a, b):
    ad, bd = _as_data(a), _as_data(b)
    return make_node(ad * bd, (
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ))


def div(a, b):
    ad, bd = _as_data(a), _as_data(b)
    return make_node(ad / bd, (
        (a, lambda g: _unbroadcast(g / bd, ad.shape)),
        (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    ))


def pow_scalar(a, k):
    if isinstance(k, Tensor):
        raise UnsupportedOperationError("only scalar exponents are supported")
    ad = _as_data(a)
    out = ad**k
    return make_node(out, ((a, lambda g: g * (k * ad ** (k - 1))),))


def exp(a):
    out = np.exp(_as_data(a))
    return make_node(out, ((a, lambda g: g * out),))


def log(a):
    ad = _as_data(a)
    return make_node(np.log(ad), ((a, lambda g: g / ad),))


def sqrt(a):
    out = np.sqrt(_as_data(a))
    return make_node(out, ((a, lambda g: g * (0.5 / out)),))


def relu(a):
    ad = _as_data(a)
    mask = ad > 0
    return make_node(np.where(mask, ad, 0.0).astype(ad.dtype, copy=False),
                     ((a, lambda g: g * mask),))


def clamp_min(a, floor: float):
    """max(a, floor); gradient passes where a >= floor."""
    ad = _as_data(a)
    mask = ad >= floor
    return make_node(np.maximum(ad, floor), ((a, lambda g: g * mask),))


# ---------------------------------------------------------------------------
# shape and reduction ops


def reshape(a, shape):
    ad = _as_data(a)
    return make_node(ad.reshape(shape), ((a, lambda g: g.reshape(ad.shape)),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_node(_as_data(a).transpose(axes), ((a, lambda g: g.transpose(inv)),))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    ad = _as_data(a)
    out = ad.sum(axis=axis, keepdims=keepdims)
    return make_node(out, ((a, lambda g: _expand_reduced(g, ad.shape, axis, keepdims).astype(ad.dtype, copy=False)),))


def tmean(a, axis=None, keepdims=False):
    ad = _as_data(a)
    out = ad.mean(axis=axis, keepdims=keepdims)
    count = ad.size / out.size
    return make_node(out, ((a, lambda g: (_expand_reduced(g, ad.shape, axis, keepdims) / count).astype(ad.dtype, copy=False)),))


def matmul(a, b):
    ad, bd = _as_data(a), _as_data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise ContractError("matmul supports 2-D operands only")
    return make_node(ad @ bd, (
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ))


def concat(tensors, axis: int = 0):
    datas = [_as_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return make_node(out, tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs=None):
    """Populate gradients for everything reachable from ``loss``.

    With ``inputs`` given, gradients are returned as ``{tensor: array}``
    for exactly those tensors and nothing else is touched; this is how
    input-only gradients (adversarial generation) stay isolated from the
    parameter ``grad`` fields.
    """
    if loss.data.size != 1:
        raise ContractError("backward expects a scalar loss")
    if loss._backward_done:
        raise UnsupportedOperationError("backward was already run for this graph")
    loss._backward_done = True

    grads = {id(loss): np.ones_like(loss.data)}
    order = _topo_order(loss)
    wanted = None if inputs is None else {id(t): t for t in inputs}

    useful = None
    if wanted is not None:
        # Only propagate along paths that reach a wanted leaf; spares the
        # (expensive) weight-gradient kernels during input-only passes.
        useful = set(wanted)
        for node in order:  # leaves first
            if id(node) in useful:
                continue
            if any(id(p) in useful for p, _ in node._vjps):
                useful.add(id(node))

    collected = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if wanted is not None and id(node) in wanted:
            collected[id(node)] = g
        for parent, fn in node._vjps:
            pid = id(parent)
            if useful is not None and pid not in useful:
                continue
            contribution = fn(g)
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = contribution
        if node._vjps == () and wanted is None and node.requires_grad:
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad += g
    if wanted is not None:
        return {t: collected[tid] for tid, t in wanted.items() if tid in collected}
    return None
