"""Self-contained differentiable neural core."""

from .adversarial import fgsm
from .ema import EmaWeights
from .functional import (
    cross_entropy,
    entropy,
    js_divergence,
    mse,
    one_hot,
    softmax,
    softmax_np,
)
from .layers import BatchNorm2d, Conv2d, Linear, MaxPool2x2, Module, frozen_bn_stats
from .optim import Adam, cosine_lr
from .tensor import Tensor, backward, concat, finite_guard, no_grad, relu
from .wideresnet import WideResNet, build_wideresnet

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "EmaWeights",
    "Linear",
    "MaxPool2x2",
    "Module",
    "Tensor",
    "WideResNet",
    "backward",
    "build_wideresnet",
    "concat",
    "cosine_lr",
    "cross_entropy",
    "entropy",
    "fgsm",
    "finite_guard",
    "frozen_bn_stats",
    "js_divergence",
    "mse",
    "no_grad",
    "one_hot",
    "relu",
    "softmax",
    "softmax_np",
]
