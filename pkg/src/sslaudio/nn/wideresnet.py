"""Wide residual network for spectrogram classification.

Structure: a conv/BN/ReLU stem, a 2x2 max pool, three groups of
pre-activation residual units (two 3x3 convs each; the first unit of
groups 2 and 3 downsamples with stride 2 and a 1x1 projection skip),
then global average pooling, ReLU and a linear head.

The full-size configuration uses widths (32, 64, 128) with 4 units per
group, about 1.47 M parameters for 10 to 35 classes.  ``widths`` and
``repeats`` scale the network down for quick experiments.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, ContractError
from .layers import BatchNorm2d, Conv2d, Linear, MaxPool2x2, Module
from .tensor import Tensor, relu, tmean

DEFAULT_WIDTHS = (32, 64, 128)
DEFAULT_REPEATS = 4


class PreActUnit(Module):
    """BN-ReLU-conv x2 with an identity or projected skip connection."""

    def __init__(self, in_ch, out_ch, stride, rng, dtype):
        super().__init__()
        self.bn1 = BatchNorm2d(in_ch, dtype=dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, rng=rng, dtype=dtype)

    def forward(self, x):
        h = relu(self.bn1(x))
        out = self.conv1(h)
        out = self.conv2(relu(self.bn2(out)))
        skip = self.proj(h) if self.proj is not None else x
        return skip + out


class WideResNet(Module):
    def __init__(self, n_classes, input_shape, widths=DEFAULT_WIDTHS,
                 repeats=DEFAULT_REPEATS, rng=None, dtype=np.float32):
        super().__init__()
        frames, mels = input_shape
        if frames < 8 or mels < 8:
            raise ConfigurationError(
                f"input {frames}x{mels} too small: three 2x downsamplings need >= 8x8"
            )
        rng = rng or np.random.default_rng()
        self.n_classes = int(n_classes)
        self.input_shape = (int(frames), int(mels))
        self.widths = tuple(int(w) for w in widths)
        self.repeats = int(repeats)
        self.dtype = np.dtype(dtype)

        self.stem_conv = Conv2d(1, self.widths[0], 3, stride=1, padding=1, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(self.widths[0], dtype=dtype)
        self.pool = MaxPool2x2()
        groups = []
        in_ch = self.widths[0]
        for gi, width in enumerate(self.widths):
            units = []
            for r in range(self.repeats):
                stride = 2 if (gi > 0 and r == 0) else 1
                units.append(PreActUnit(in_ch, width, stride, rng, dtype))
                in_ch = width
            groups.append(units)
        self.group1, self.group2, self.group3 = groups
        self.head = Linear(self.widths[-1], n_classes, rng=rng, dtype=dtype)

    def describe(self) -> list:
        """Topology as a layer list (for reports and checkpoint headers)."""
        desc = [f"conv3x3(1->{self.widths[0]})+bn+relu", "maxpool2x2"]
        for gi, width in enumerate(self.widths):
            desc.append(f"group{gi + 1}: {self.repeats} x preact-unit({width})")
        desc.extend(["global-avg-pool", "relu", f"linear({self.widths[-1]}->{self.n_classes})"])
        return desc

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        if x.data.ndim == 3:
            b, frames, mels = x.data.shape
            x = x.reshape(b, 1, frames, mels)
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise ContractError(f"expected [batch, frames, mels], got shape {x.data.shape}")
        if (x.data.shape[2], x.data.shape[3]) != self.input_shape:
            raise ContractError(
                f"input {x.data.shape[2:]} does not match model input {self.input_shape}"
            )

        h = relu(self.stem_bn(self.stem_conv(x)))
        h = self.pool(h)
        for unit in self.group1:
            h = unit(h)
        for unit in self.group2:
            h = unit(h)
        for unit in self.group3:
            h = unit(h)
        h = tmean(h, axis=(2, 3))
        return self.head(relu(h))


def build_wideresnet(n_classes, input_shape, widths=DEFAULT_WIDTHS,
                     repeats=DEFAULT_REPEATS, rng=None, dtype=np.float32) -> WideResNet:
    return WideResNet(n_classes, input_shape, widths, repeats, rng, dtype)
