"""Tiny single-head vision transformer with attention rollout and temperature smoothing."""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import Module, component_rng


@dataclass(frozen=True)
class ViTConfig:
    input_shape: tuple = (1, 28, 28)
    patch: int = 7
    dim: int = 64
    depth: int = 2
    mlp_hidden: int = 128
    num_classes: int = 3
    heads: int = 1
    temperature: float = 1.0

    def grid(self):
        C, H, W = self.input_shape
        if H % self.patch or W % self.patch:
            raise ValueError(f"patch size {self.patch} does not divide {H}x{W}")
        return H // self.patch, W // self.patch

    def validate(self):
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        self.grid()


def split_patches(x, P):
    """(B, C, H, W) -> (B, n, C*P*P) in row-major patch order; each row is the flattened crop."""
    B, C, H, W = x.shape
    if H % P or W % P:
        raise T.ShapeError(f"patch size {P} does not divide {H}x{W}")
    gh, gw = H // P, W // P
    t = T.reshape(x, (B, C, gh, P, gw, P))
    t = T.transpose(t, (0, 2, 4, 1, 3, 5))
    return T.reshape(t, (B, gh * gw, C * P * P))


def patchify(x, P, proj_w, proj_b, cls_token, pos_emb):
    """Patch embeddings E_i = x_i W + b + PE_i with the class token prepended at index 0."""
    patches = split_patches(x, P)
    B, n, _ = patches.shape
    D = proj_w.shape[1]
    if pos_emb.shape != (n + 1, D):
        raise T.ShapeError(f"position embedding {pos_emb.shape} != ({n + 1}, {D})")
    emb = T.reshape(T.linear(T.reshape(patches, (B * n, -1)), proj_w, proj_b), (B, n, D))
    cls = T.broadcast_to(T.reshape(cls_token, (1, 1, D)), (B, 1, D))
    seq = T.concat([cls, emb], axis=1)
    return seq + T.broadcast_to(T.reshape(pos_emb, (1, n + 1, D)), (B, n + 1, D))


def self_attention(h, wq, wk, wv, temperature=1.0):
    """Single-head attention on (B, S, D). Returns outputs and the (B, S, S) attention."""
    D = h.shape[-1]
    q = T.einsum("bsd,de->bse", h, wq)
    k = T.einsum("bsd,de->bse", h, wk)
    v = T.einsum("bsd,de->bse", h, wv)
    logits = T.einsum("bse,bte->bst", q, k) * (1.0 / (temperature * np.sqrt(D)))
    att = T.softmax(logits, axis=2)
    return T.einsum("bst,bte->bse", att, v), att


def _expand(vec, shape):
    return T.broadcast_to(T.reshape(vec, (1,) * (len(shape) - 1) + (shape[-1],)), shape)


def attention_block(seq, p, temperature=1.0):
    """Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)). Returns (seq', attention)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    B, S, D = seq.shape
    if p["wq"].shape != (D, D):
        raise T.ShapeError(f"block width {p['wq'].shape} does not match sequence width {D}")
    a, att = self_attention(T.layer_norm(seq, p["ln1.g"], p["ln1.b"]), p["wq"], p["wk"], p["wv"], temperature)
    h = seq + a
    z = T.reshape(T.layer_norm(h, p["ln2.g"], p["ln2.b"]), (B * S, D))
    z = T.linear(T.gelu(T.linear(z, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"])
    return h + T.reshape(z, (B, S, D)), att


class ViT(Module):
    kind = "vit"

    def __init__(self, config=ViTConfig(), seed=0):
        super().__init__()
        config.validate()
        self.config = config
        rng = component_rng(seed, "vit")
        C = config.input_shape[0]
        gh, gw = config.grid()
        n = gh * gw
        D, P = config.dim, config.patch
        pdim = C * P * P
        self.proj_w = self.param("embed.w", rng.standard_normal((pdim, D)) * np.sqrt(1.0 / pdim))
        self.proj_b = self.param("embed.b", np.zeros(D))
        self.cls = self.param("embed.cls", rng.standard_normal(D) * 0.02)
        self.pos = self.param("embed.pos", rng.standard_normal((n + 1, D)) * 0.02)
        self.blocks = []
        for i in range(config.depth):
            blk = {
                "ln1.g": np.ones(D), "ln1.b": np.zeros(D),
                "wq": rng.standard_normal((D, D)) * np.sqrt(1.0 / D),
                "wk": rng.standard_normal((D, D)) * np.sqrt(1.0 / D),
                "wv": rng.standard_normal((D, D)) * np.sqrt(1.0 / D),
                "ln2.g": np.ones(D), "ln2.b": np.zeros(D),
                "fc1.w": rng.standard_normal((D, config.mlp_hidden)) * np.sqrt(2.0 / D),
                "fc1.b": np.zeros(config.mlp_hidden),
                "fc2.w": rng.standard_normal((config.mlp_hidden, D)) * np.sqrt(1.0 / config.mlp_hidden),
                "fc2.b": np.zeros(D),
            }
            self.blocks.append({k: self.param(f"block{i}.{k}", v) for k, v in blk.items()})
        self.norm_g = self.param("head.ln.g", np.ones(D))
        self.norm_b = self.param("head.ln.b", np.zeros(D))
        self.head_w = self.param("head.w", rng.standard_normal((D, config.num_classes)) * np.sqrt(1.0 / D))
        self.head_b = self.param("head.b", np.zeros(config.num_classes))
        self.temperature = config.temperature

    def embed(self, x):
        return patchify(x, self.config.patch, self.proj_w, self.proj_b, self.cls, self.pos)

    def forward(self, x, return_attention=False, temperature=None):
        """Logits from the class token; optionally the per-layer attention record."""
        x = T.as_tensor(x)
        if x.shape[-3:] != tuple(self.config.input_shape):
            raise T.ShapeError(f"input {x.shape} does not match {self.config.input_shape}")
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1, *x.shape))
        tau = self.temperature if temperature is None else temperature
        h = self.embed(x)
        record = []
        for blk in self.blocks:
            h, att = attention_block(h, blk, tau)
            record.append(att.data)
        cls = T.layer_norm(h[:, 0], self.norm_g, self.norm_b)
        logits = T.linear(cls, self.head_w, self.head_b)
        if single:
            logits = T.reshape(logits, (logits.shape[1],))
            record = [a[0] for a in record]
        return (logits, record) if return_attention else logits

    def scores(self, x):
        return self.forward(x)

    def loss(self, x, y):
        return T.cross_entropy(self.forward(x), y)

    attack_loss = loss

    def attention_record(self, x):
        with T.no_grad():
            return self.forward(x, return_attention=True)[1]


def vit_forward(x, model):
    return model.forward(x)


class SmoothedViT:
    """A view of a ViT whose attention runs at temperature tau. Shares the parameters."""

    kind = "vit"

    def __init__(self, base, tau):
        self.base = base
        self.temperature = float(tau)
        self.config = replace(base.config, temperature=float(tau))

    def forward(self, x, return_attention=False):
        return self.base.forward(x, return_attention=return_attention, temperature=self.temperature)

    def scores(self, x):
        return self.forward(x)

    def loss(self, x, y):
        return T.cross_entropy(self.forward(x), y)

    attack_loss = loss

    def parameters(self):
        return self.base.parameters()

    def named_parameters(self):
        return self.base.named_parameters()

    def num_parameters(self):
        return self.base.num_parameters()

    def predict(self, x, batch=256):
        return Module.predict(self, x, batch)


def smooth_attention(model, tau):
    """Model view with attention logits divided by tau (tau = 1 is the model itself)."""
    if tau < 1:
        raise ValueError(f"smoothing temperature must be >= 1, got {tau}")
    base = model.base if isinstance(model, SmoothedViT) else model
    return SmoothedViT(base, tau)


def attention_rollout(record):
    """Class-token attribution over patches from per-layer attention (each (S, S) or (B, S, S)).

    Each layer contributes normalize_rows(A + I); the product runs from the last
    layer down to the first. The class-token row is restricted to patch
    positions and renormalised; an all-zero patch mass falls back to uniform.
    Returns (gh*gw,) or (B, gh*gw) probability vectors.
    """
    if len(record) == 0:
        raise ValueError("attention record is empty")
    mats = [np.asarray(a, dtype=np.float64) for a in record]
    single = mats[0].ndim == 2
    if single:
        mats = [m[None] for m in mats]
    S = mats[0].shape[-1]
    eye = np.eye(S)
    roll = np.broadcast_to(eye, mats[0].shape).copy()
    for A in mats:
        Ah = A + eye
        Ah = Ah / Ah.sum(axis=-1, keepdims=True)
        roll = Ah @ roll
    mass = roll[:, 0, 1:]
    tot = mass.sum(axis=-1, keepdims=True)
    n = S - 1
    out = np.where(tot > 0, mass / np.where(tot > 0, tot, 1.0), 1.0 / n)
    return out[0] if single else out


def rollout_heatmap(record, grid):
    r = attention_rollout(record)
    return r.reshape(*r.shape[:-1], *grid)
