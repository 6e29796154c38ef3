"""Model registry: build any of the five classifier kinds by name."""

from dataclasses import replace

from .capsnet import AffCapsNet, CapsConfig, DRCapsNet
from .convnet import ConvNet, ConvNetConfig
from .gracapsnet import GraCapsConfig, GraCapsNet
from .vit import ViT, ViTConfig

KINDS = ("convnet", "capsnet", "affcapsnet", "gracapsnet", "vit")

# epochs are an upper bound; training stops once train accuracy reaches `stop_at`
TRAIN_DEFAULTS = {
    "convnet": dict(epochs=20, lr=1e-3, batch=32),
    "capsnet": dict(epochs=20, lr=1e-3, batch=32),
    "affcapsnet": dict(epochs=40, lr=3e-3, batch=32),
    "gracapsnet": dict(epochs=30, lr=3e-3, batch=32),
    "vit": dict(epochs=40, lr=1e-3, batch=32),
}


def build_model(kind, seed=0, num_classes=3, input_shape=(1, 28, 28), routing_iters=None, attn_temp=None,
                bias=True, route_grad=False):
    if kind == "convnet":
        return ConvNet(ConvNetConfig(input_shape=tuple(input_shape), num_classes=num_classes, bias=bias), seed=seed)
    if kind in ("capsnet", "affcapsnet"):
        cfg = CapsConfig(input_shape=tuple(input_shape), num_classes=num_classes, route_grad=route_grad)
        if routing_iters is not None:
            cfg = replace(cfg, routing_iters=int(routing_iters))
        return (DRCapsNet if kind == "capsnet" else AffCapsNet)(cfg, seed=seed)
    if kind == "gracapsnet":
        return GraCapsNet(GraCapsConfig(input_shape=tuple(input_shape), num_classes=num_classes), seed=seed)
    if kind == "vit":
        cfg = ViTConfig(input_shape=tuple(input_shape), num_classes=num_classes)
        if attn_temp is not None:
            cfg = replace(cfg, temperature=float(attn_temp))
        return ViT(cfg, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
