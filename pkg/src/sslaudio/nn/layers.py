"""Neural network modules: conv, batch norm, linear, pooling.

Layers follow the familiar module pattern: parameters are ``Tensor``
leaves with ``requires_grad=True``, submodules are discovered by
reflection over instance attributes (lists of modules included), and
``train()`` / ``eval()`` toggle batch-norm behavior.

Conv2d uses an im2col gather (k*k strided slices) feeding one GEMM; its
backward rebuilds the columns and scatters through the same slices, so no
per-element indexing is ever needed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, is_grad_enabled, make_node

_bn_stats_frozen = False


@contextmanager
def frozen_bn_stats():
    """Suspend running-statistics updates (probe passes that must not
    perturb state: pseudo-labeling, adversarial generation, oracles)."""
    global _bn_stats_frozen
    prev = _bn_stats_frozen
    _bn_stats_frozen = True
    try:
        yield
    finally:
        _bn_stats_frozen = prev


class Module:
    """Minimal module base: parameter/buffer discovery, mode, state dict."""

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def __call__(self, x):
        return self.forward(x)

    def _children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self):
        self.training = True
        for _, child in self._children():
            child.train()
        return self

    def eval(self):
        self.training = False
        for _, child in self._children():
            child.eval()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict:
        state = {f"param:{n}": np.array(p.data, copy=True) for n, p in self.named_parameters()}
        state.update({f"buffer:{n}": np.array(b, copy=True) for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = {f"param:{n}" for n in own_params} | {f"buffer:{n}" for n in own_buffers}
        if expected != set(state):
            missing = expected - set(state)
            extra = set(state) - expected
            raise ContractError(f"state dict mismatch; missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, p in own_params.items():
            src = state[f"param:{name}"]
            if src.shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}")
            p.data = np.array(src, copy=True).astype(p.data.dtype, copy=False)
        for name in own_buffers:
            owner, attr = self._locate_buffer(name)
            setattr(owner, attr, np.array(state[f"buffer:{name}"], copy=True))
        return self

    def _locate_buffer(self, dotted: str):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part.isdigit() and isinstance(obj, (list, tuple)):
                obj = obj[int(part)]
            else:
                obj = getattr(obj, part)
        return obj, parts[-1]


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.items = list(modules)

    def forward(self, x):
        for m in self.items:
            x = m(x)
        return x


# ---------------------------------------------------------------------------
# fused kernels


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[N, C, k, k, oh, ow] gather of conv windows from a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def conv2d_op(x, w, stride: int, padding: int):
    """3x3-style convolution as one GEMM over gathered columns.

    x: [N, C, H, W]; w: [F, C, k, k]; returns [N, F, oh, ow].
    """
    xd, wd = x.data if isinstance(x, Tensor) else np.asarray(x), w.data
    n, c, h, wdt = xd.shape
    f, c2, k, k2 = wd.shape
    if c != c2 or k != k2:
        raise ContractError(f"conv weight {wd.shape} incompatible with input {xd.shape}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wdt + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractError(f"input {h}x{wdt} too small for kernel {k} stride {stride}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    colmat = _im2col(xp, k, stride, oh, ow).transpose(0, 4, 5, 1, 2, 3).reshape(
        n * oh * ow, c * k * k)
    out = (colmat @ wd.reshape(f, -1).T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def vjp_x(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        gcols = (gmat @ wd.reshape(f, -1)).reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, :, i, j]
        if padding:
            return dxp[:, :, padding : padding + h, padding : padding + wdt]
        return dxp

    def vjp_w(g):
        # reuses the forward's gathered columns (kept alive by this closure)
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        return (gmat.T @ colmat).reshape(wd.shape)

    return make_node(np.ascontiguousarray(out), ((x, vjp_x), (w, vjp_w)))


def maxpool2x2_op(x):
    """2x2 max pooling, stride 2, floor semantics on odd dimensions."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    n, c, h, w = xd.shape
    oh, ow = h // 2, w // 2
    if oh < 1 or ow < 1:
        raise ContractError(f"input {h}x{w} too small for 2x2 pooling")
    win = xd[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gwin = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
        if 2 * oh == h and 2 * ow == w:
            return gwin
        dx = np.zeros_like(xd)
        dx[:, :, : 2 * oh, : 2 * ow] = gwin
        return dx

    return make_node(np.ascontiguousarray(out), ((x, vjp),))


def batchnorm_train_op(x, gamma, beta, eps: float):
    """Batch normalization over (N, H, W) per channel, training statistics.

    Returns (out, batch_mean, batch_var) with batch statistics as plain
    arrays so the layer can update its running estimates.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    gd, bd = gamma.data, beta.data
    axes = (0, 2, 3)
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mean = xd.mean(axis=axes)
    var = xd.var(axis=axes)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * ivar[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

    def vjp_x(g):
        dxhat = g * gd[None, :, None, None]
        sum_dxhat = dxhat.sum(axis=axes)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)
        return (ivar[None, :, None, None] / m) * (
            m * dxhat
            - sum_dxhat[None, :, None, None]
            - xhat * sum_dxhat_xhat[None, :, None, None]
        )

    node = make_node(out.astype(xd.dtype, copy=False), (
        (x, vjp_x),
        (gamma, lambda g: (g * xhat).sum(axis=axes)),
        (beta, lambda g: g.sum(axis=axes)),
    ))
    return node, mean, var


# ---------------------------------------------------------------------------
# layers


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        fan_in = in_channels * kernel_size * kernel_size
        # He-normal: suits the ReLU blocks this feeds.
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d_op(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        if self.training:
            out, mean, var = batchnorm_train_op(x, self.gamma, self.beta, self.eps)
            if not _bn_stats_frozen:
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
            return out
        dtype = x.data.dtype if isinstance(x, Tensor) else np.asarray(x).dtype
        ivar = (1.0 / np.sqrt(self.running_var + self.eps)).astype(dtype)
        mean = self.running_mean.astype(dtype)
        scale = (self.gamma * ivar).reshape(1, -1, 1, 1)
        shift = (self.beta - self.gamma * (mean * ivar)).reshape(1, -1, 1, 1)
        return x * scale + shift


class Linear(Module):
    def __init__(self, in_features, out_features, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(in_features, out_features)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=out_features).astype(dtype),
                           requires_grad=True)

    def forward(self, x):
        return x @ self.weight + self.bias


class MaxPool2x2(Module):
    def forward(self, x):
        return maxpool2x2_op(x)
