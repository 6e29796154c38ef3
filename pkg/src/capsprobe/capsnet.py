"""Capsule networks: dynamic-routing CapsNet and the shared-transform, routing-free AffCapsNet.

Tensor layouts (batch first):
    primary capsules u      (B, N, D_in)
    votes u_hat[j|i]        (B, N, M, D_out)
    coupling c[i, j]        (B, N, M)
    output capsules v       (B, M, D_out)
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .nn import Module, component_rng, he_normal

M_PLUS = 0.9
M_MINUS = 0.1
LAMBDA = 0.5


def extract_primary(features, d_in):
    """Regroup (B, C', H', W') feature maps into N = C'/d_in * H' * W' capsules of size d_in.

    Capsule (g, h, w) holds channels g*d_in .. g*d_in + d_in - 1 at (h, w);
    capsules are ordered g-major, then row-major over (h, w).
    """
    single = features.ndim == 3
    f = T.reshape(features, (1, *features.shape)) if single else features
    B, C, H, W = f.shape
    if C % d_in:
        raise ValueError(f"{C} feature channels are not divisible by capsule size {d_in}")
    G = C // d_in
    u = T.reshape(T.transpose(T.reshape(f, (B, G, d_in, H, W)), (0, 1, 3, 4, 2)), (B, G * H * W, d_in))
    return T.reshape(u, u.shape[1:]) if single else u


def vote(u, W):
    """u_hat[j|i] = W_ij u_i.

    ``W`` is (N, M, D_out, D_in) for per-capsule transforms or (M, D_out, D_in)
    when one transform per class is shared by every primary capsule.
    """
    if u.ndim != 3:
        raise T.ShapeError(f"primary capsules must be (B, N, D_in), got {u.shape}")
    B, N, Din = u.shape
    if W.ndim == 4:
        if W.shape[0] != N or W.shape[3] != Din:
            raise T.ShapeError(f"transform {W.shape} does not fit capsules {u.shape}")
        return T.einsum("bni,nmdi->bnmd", u, W)
    if W.ndim == 3:
        if W.shape[2] != Din:
            raise T.ShapeError(f"shared transform {W.shape} does not fit capsules {u.shape}")
        return T.einsum("bni,mdi->bnmd", u, W)
    raise T.ShapeError(f"transform must be rank 3 or 4, got {W.shape}")


squash = T.squash


def squash_np(s, axis=-1):
    s = np.asarray(s, dtype=np.float64)
    sq = np.sum(s * s, axis=axis, keepdims=True)
    n = np.sqrt(sq)
    return s * (n / (1.0 + sq))


def dynamic_routing(votes, iters=3, differentiable=False, return_history=False):
    """Routing by agreement over a vote tensor (B, N, M, D).

    Logits start at zero. Each iteration: c = softmax over output capsules,
    s_j = sum_i c_ij u_hat[j|i], v_j = squash(s_j), then b_ij += v_j . u_hat[j|i].

    With ``differentiable=False`` the coupling coefficients are computed off
    the tape and enter the final combination as constants. Returns ``(v, c)``
    (plus the per-iteration coefficients if requested), ``c`` being the
    coefficients that produced ``v``.
    """
    if iters < 1:
        raise ValueError("routing needs at least one iteration")
    if votes.ndim != 4:
        raise T.ShapeError(f"votes must be (B, N, M, D), got {votes.shape}")
    if not differentiable:
        hist, _ = kernels.route(np.ascontiguousarray(votes.data), int(iters))
        c = hist[-1]
        v = T.squash(T.einsum("bnm,bnmd->bmd", T.Tensor._wrap(c), votes))
        return (v, c, hist) if return_history else (v, c)

    B, N, M, D = votes.shape
    b = T.Tensor._wrap(np.zeros((B, N, M)))
    hist = []
    for it in range(iters):
        c = T.softmax(b, axis=2)
        hist.append(c.data)
        v = T.squash(T.einsum("bnm,bnmd->bmd", c, votes))
        if it < iters - 1:
            b = b + T.einsum("bmd,bnmd->bnm", v, votes)
    return (v, c.data, np.stack(hist)) if return_history else (v, c.data)


def capsule_lengths(v):
    return T.vector_norm(v, axis=-1)


def margin_loss(v, target):
    """Per-sample sum over classes of the hinge-squared margin loss, averaged over the batch.

    ``v`` is (M, D) with an int target or (B, M, D) with B targets.
    """
    single = v.ndim == 2
    v = T.reshape(v, (1, *v.shape)) if single else v
    B, M, _ = v.shape
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if target.shape[0] != B:
        raise T.ShapeError(f"{target.shape[0]} targets for {B} samples")
    if np.any(target < 0) or np.any(target >= M):
        raise ValueError(f"target out of range for {M} classes")
    onehot = np.zeros((B, M))
    onehot[np.arange(B), target] = 1.0
    lengths = capsule_lengths(v)
    present = T.clamp_min(M_PLUS - lengths, 0.0) ** 2
    absent = T.clamp_min(lengths - M_MINUS, 0.0) ** 2
    per = present * T.Tensor._wrap(onehot) + absent * T.Tensor._wrap(LAMBDA * (1.0 - onehot))
    return T.sum_(per) * (1.0 / B)


def margin_loss_from_lengths(lengths, target):
    """Plain-number margin loss for one sample, used for closed-form checks."""
    lengths = np.asarray(lengths, dtype=np.float64)
    t = np.zeros_like(lengths)
    t[target] = 1.0
    return float(np.sum(t * np.maximum(0, M_PLUS - lengths) ** 2 + LAMBDA * (1 - t) * np.maximum(0, lengths - M_MINUS) ** 2))


def mask_capsules(v, target):
    """Zero every capsule except the target class and flatten to (B, M*D)."""
    B, M, D = v.shape
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    mask = np.zeros((B, M, D))
    mask[np.arange(B), target, :] = 1.0
    return T.reshape(v * T.Tensor._wrap(mask), (B, M * D))


class Decoder(Module):
    """Two fully connected layers, sigmoid output shaped like the input image."""

    def __init__(self, in_width, image_shape, hidden=512, seed=0):
        super().__init__()
        rng = component_rng(seed, "decoder")
        self.image_shape = tuple(image_shape)
        pixels = int(np.prod(image_shape))
        self.in_width = in_width
        self.w1 = self.param("dec.w1", he_normal(rng, (in_width, hidden), in_width))
        self.b1 = self.param("dec.b1", np.zeros(hidden))
        self.w2 = self.param("dec.w2", rng.standard_normal((hidden, pixels)) * np.sqrt(1.0 / hidden))
        self.b2 = self.param("dec.b2", np.zeros(pixels))

    def __call__(self, z):
        if z.ndim != 2 or z.shape[1] != self.in_width:
            raise T.ShapeError(f"decoder expects (B, {self.in_width}), got {z.shape}")
        h = T.relu(T.linear(z, self.w1, self.b1))
        out = T.sigmoid(T.linear(h, self.w2, self.b2))
        return T.reshape(out, (z.shape[0], *self.image_shape))


def reconstruct(v, target, decoder):
    """Class-conditional reconstruction from the target capsule alone."""
    single = v.ndim == 2
    v = T.reshape(v, (1, *v.shape)) if single else v
    B, M, D = v.shape
    if decoder.in_width != M * D:
        raise T.ShapeError(f"decoder input width {decoder.in_width} != {M}*{D}")
    img = decoder(mask_capsules(v, target))
    return T.reshape(img, img.shape[1:]) if single else img


def affcaps_forward(u, W_shared):
    """v_j = squash(mean_i W_j u_i): one transform per class, averaging instead of routing."""
    if W_shared.ndim != 3:
        raise T.ShapeError(f"shared transform must be (M, D_out, D_in), got {W_shared.shape}")
    if u.ndim != 3 or u.shape[2] != W_shared.shape[2]:
        raise T.ShapeError(f"capsules {u.shape} do not fit transform {W_shared.shape}")
    N = u.shape[1]
    return T.squash(T.einsum("bni,mdi->bmd", u, W_shared) * (1.0 / N))


def caps_predict(v):
    """Index of the longest capsule; ties go to the lowest index."""
    lengths = np.linalg.norm(np.asarray(v.data if isinstance(v, T.Tensor) else v), axis=-1)
    return np.argmax(lengths, axis=-1)


@dataclass(frozen=True)
class CapsConfig:
    input_shape: tuple = (1, 28, 28)
    conv1: tuple = (16, 5, 1)  # filters, kernel, stride
    conv2: tuple = (32, 5, 2)
    d_in: int = 8
    d_out: int = 16
    num_classes: int = 3
    routing_iters: int = 3
    route_grad: bool = False
    decoder_hidden: int = 512
    recon_weight: float = 0.0005  # per pixel, multiplies a mean squared error summed back to pixel scale
    reconstruction: bool = True

    def primary_grid(self):
        C, H, W = self.input_shape
        for f, k, s in (self.conv1, self.conv2):
            if k > H or k > W:
                raise ValueError(f"kernel {k} larger than feature map {H}x{W}")
            H, W = (H - k) // s + 1, (W - k) // s + 1
            C = f
        if C % self.d_in:
            raise ValueError(f"{C} stem channels not divisible by d_in={self.d_in}")
        return C // self.d_in, H, W

    def num_primary(self):
        G, H, W = self.primary_grid()
        return G * H * W


class _CapsuleBase(Module):
    def __init__(self, config, seed, tag):
        super().__init__()
        self.config = config
        self.rng = component_rng(seed, tag)
        C = config.input_shape[0]
        self.stem = []
        for i, (f, k, s) in enumerate((config.conv1, config.conv2), start=1):
            w = self.param(f"conv{i}.w", he_normal(self.rng, (f, C, k, k), C * k * k))
            b = self.param(f"conv{i}.b", np.zeros(f))
            self.stem.append((w, b, s))
            C = f
        self._seed = seed

    def _add_decoder(self):
        if not self.config.reconstruction:
            self.decoder = None
            return
        cfg = self.config
        self.decoder = Decoder(cfg.num_classes * cfg.d_out, cfg.input_shape, cfg.decoder_hidden, seed=self._seed)
        for k, p in self.decoder.named_parameters().items():
            self._params[k] = p

    def _batch(self, x):
        x = T.as_tensor(x)
        if x.shape[-3:] != tuple(self.config.input_shape):
            raise T.ShapeError(f"input {x.shape} does not match {self.config.input_shape}")
        return (T.reshape(x, (1, *x.shape)), True) if x.ndim == 3 else (x, False)

    def primary(self, x):
        """Squashed primary capsules (B, N, D_in)."""
        h, _ = self._batch(x)
        for i, (w, b, s) in enumerate(self.stem):
            h = T.conv2d(h, w, b, stride=s)
            if i < len(self.stem) - 1:
                h = T.relu(h)
        return T.squash(extract_primary(h, self.config.d_in))

    def scores(self, x):
        return capsule_lengths(self.forward(x))

    def attack_loss(self, x, y):
        return margin_loss(self.forward(x), y)

    def loss(self, x, y):
        x = T.as_tensor(x)
        v = self.forward(x)
        total = margin_loss(v, y)
        if self.decoder is not None:
            rec = reconstruct(v, y, self.decoder)
            pixels = int(np.prod(self.config.input_shape))
            target = x if x.ndim == 4 else T.reshape(x, (1, *x.shape))
            total = total + T.mse(rec, target.detach()) * (self.config.recon_weight * pixels)
        return total

    def reconstruct(self, x, target=None):
        v = self.forward(x)
        if target is None:
            target = caps_predict(v)
        return reconstruct(v, target, self.decoder)


class DRCapsNet(_CapsuleBase):
    """Conv stem -> primary capsules -> per-capsule votes -> dynamic routing."""

    kind = "capsnet"

    def __init__(self, config=CapsConfig(), seed=0):
        super().__init__(config, seed, "capsnet")
        N = config.num_primary()
        self.W = self.param("caps.W", self.rng.standard_normal((N, config.num_classes, config.d_out, config.d_in)) * 0.5)
        self._add_decoder()

    def transform_params(self):
        return self.W.size

    def votes(self, x):
        return vote(self.primary(x), self.W)

    def forward(self, x, return_coupling=False):
        single = T.as_tensor(x).ndim == 3
        u_hat = self.votes(x)
        v, c = dynamic_routing(u_hat, self.config.routing_iters, differentiable=self.config.route_grad)
        if single:
            v = T.reshape(v, v.shape[1:])
        return (v, c) if return_coupling else v


class AffCapsNet(_CapsuleBase):
    """One transform per class shared by all primary capsules; routing replaced by averaging."""

    kind = "affcapsnet"

    def __init__(self, config=CapsConfig(), seed=0):
        super().__init__(config, seed, "affcapsnet")
        self.W = self.param("caps.W", self.rng.standard_normal((config.num_classes, config.d_out, config.d_in)) * 0.5)
        self._add_decoder()

    def transform_params(self):
        return self.W.size

    def votes(self, x):
        return vote(self.primary(x), self.W)

    def forward(self, x):
        single = T.as_tensor(x).ndim == 3
        v = affcaps_forward(self.primary(x), self.W)
        return T.reshape(v, v.shape[1:]) if single else v
