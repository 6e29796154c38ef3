"""LeNet-style baseline: two conv/ReLU/max-pool stages and an MLP head."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, component_rng, he_normal


@dataclass(frozen=True)
class ConvNetConfig:
    input_shape: tuple = (1, 28, 28)
    conv1: tuple = (8, 5, 1)  # filters, kernel, stride
    conv2: tuple = (16, 5, 1)
    pool: int = 2
    hidden: tuple = (64,)
    num_classes: int = 3
    bias: bool = True

    def feature_shapes(self):
        """Shapes after each conv and pool stage; raises if the arithmetic does not work out."""
        C, H, W = self.input_shape
        shapes = []
        for f, k, s in (self.conv1, self.conv2):
            if k > H or k > W:
                raise ValueError(f"kernel {k} larger than feature map {H}x{W}")
            H, W = (H - k) // s + 1, (W - k) // s + 1
            shapes.append((f, H, W))
            if H % self.pool or W % self.pool:
                raise ValueError(f"pool {self.pool} does not divide {H}x{W}")
            H, W = H // self.pool, W // self.pool
            shapes.append((f, H, W))
        return shapes

    def flat_size(self):
        f, H, W = self.feature_shapes()[-1]
        return f * H * W

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        self.flat_size()


class ConvNet(Module):
    kind = "convnet"

    def __init__(self, config=ConvNetConfig(), seed=0, zero=False):
        super().__init__()
        config.validate()
        self.config = config
        rng = component_rng(seed, "convnet")
        init = (lambda shape, fan: np.zeros(shape)) if zero else (lambda shape, fan: he_normal(rng, shape, fan))
        C = config.input_shape[0]
        self.convs = []
        for i, (f, k, s) in enumerate((config.conv1, config.conv2), start=1):
            w = self.param(f"conv{i}.w", init((f, C, k, k), C * k * k))
            b = self.param(f"conv{i}.b", np.zeros(f)) if config.bias else None
            self.convs.append((w, b, s))
            C = f
        widths = [config.flat_size(), *config.hidden, config.num_classes]
        self.fcs = []
        for i, (a, o) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            w = self.param(f"fc{i}.w", init((a, o), a))
            b = self.param(f"fc{i}.b", np.zeros(o)) if config.bias else None
            self.fcs.append((w, b))

    def _batch(self, x):
        x = T.as_tensor(x)
        if x.shape[-3:] != tuple(self.config.input_shape):
            raise T.ShapeError(f"input {x.shape} does not match {self.config.input_shape}")
        return x, x.ndim == 3

    def forward(self, x):
        """Pre-softmax logits, (M,) for one image or (B, M) for a batch."""
        x, single = self._batch(x)
        h = T.reshape(x, (1, *x.shape)) if single else x
        for w, b, s in self.convs:
            h = T.max_pool(T.relu(T.conv2d(h, w, b, stride=s)), self.config.pool)
        h = T.reshape(h, (h.shape[0], -1))
        for i, (w, b) in enumerate(self.fcs):
            h = T.linear(h, w, b)
            if i < len(self.fcs) - 1:
                h = T.relu(h)
        return T.reshape(h, (h.shape[1],)) if single else h

    forward_logits = forward

    def scores(self, x):
        return self.forward(x)

    def loss(self, x, y):
        return T.cross_entropy(self.forward(x), y)

    attack_loss = loss

    def layers(self):
        """Layer list for relevance propagation: ('conv', w, b, stride) | ('relu',) | ('pool', s) | ('flatten',) | ('linear', w, b)."""
        out = []
        for w, b, s in self.convs:
            out += [("conv", w.data, None if b is None else b.data, s), ("relu",), ("pool", self.config.pool)]
        out.append(("flatten",))
        for i, (w, b) in enumerate(self.fcs):
            out.append(("linear", w.data, None if b is None else b.data))
            if i < len(self.fcs) - 1:
                out.append(("relu",))
        return out


def cross_entropy(logits, label):
    return T.cross_entropy(logits, label)
