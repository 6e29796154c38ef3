"""Affine resampling about the image centre with bilinear interpolation and zero padding."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0  # degrees
    translation: tuple = (0.0, 0.0)  # (rows, cols) in pixels
    scale: float = 1.0
    shear: float = 0.0  # degrees

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def label(self):
        parts = []
        if self.rotation:
            parts.append(f"rot{self.rotation:+g}")
        if any(self.translation):
            parts.append(f"tr{self.translation[0]:+g},{self.translation[1]:+g}")
        if self.scale != 1.0:
            parts.append(f"sc{self.scale:g}")
        if self.shear:
            parts.append(f"sh{self.shear:+g}")
        return "_".join(parts) or "identity"

    def matrix(self):
        """Linear part acting on (row, col) offsets from the centre: rotation . shear . scale."""
        th = np.deg2rad(self.rotation)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        shear = np.array([[1.0, 0.0], [np.tan(np.deg2rad(self.shear)), 1.0]])
        return rot @ shear @ (self.scale * np.eye(2))


def bilinear(img, rows, cols):
    """Sample (H, W) image at fractional coordinates; outside samples are 0."""
    H, W = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            vals = np.zeros(rows.shape)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def apply_affine(x, p):
    """Transform an image (H, W), (C, H, W) or batch (B, C, H, W) by inverse mapping."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    inv = np.linalg.inv(p.matrix())
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    off = np.stack([rr.ravel(), cc.ravel()]) - (centre + np.asarray(p.translation, dtype=np.float64))[:, None]
    src = inv @ off + centre[:, None]
    src_r = src[0].reshape(H, W)
    src_c = src[1].reshape(H, W)
    flat = x.reshape(-1, H, W)
    out = np.stack([bilinear(img, src_r, src_c) for img in flat])
    return out.reshape(x.shape)


def default_affine_grid():
    grid = [AffineParams(rotation=r) for r in (-45, -30, -15, 15, 30, 45)]
    grid += [AffineParams(translation=(t, 0.0)) for t in (-4, -2, 2, 4)]
    grid += [AffineParams(translation=(0.0, t)) for t in (-4, -2, 2, 4)]
    grid += [AffineParams(scale=s) for s in (0.8, 1.2)]
    return grid
