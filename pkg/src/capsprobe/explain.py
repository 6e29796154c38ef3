"""Relevance propagation for ConvNets, its contrastive variant, and saliency evaluation."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import Tensor, no_grad


@dataclass
class RelevanceMap:
    relevance: np.ndarray  # same shape as the input image (C, H, W)
    target: int
    rule: str = "epsilon"
    eps: float = 1e-6
    score: float = float("nan")  # the explained logit

    @property
    def pixels(self):
        """Per-pixel relevance (H, W), summed over channels."""
        r = self.relevance
        return r.sum(axis=0) if r.ndim == 3 else r


class UnsupportedLayer(TypeError):
    pass


def _stab(z, eps):
    """z + eps*sign(z) with sign(0) = +1; exact zeros stay zero when eps == 0."""
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _safe_div(num, den):
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def _conv_forward(a, w, b, stride):
    B, C, H, W = a.shape
    F, _, P, Q = w.shape
    cols = kernels.im2col(np.ascontiguousarray(a), P, Q, stride)
    z = np.matmul(w.reshape(F, -1), cols)
    if b is not None:
        z = z + b[None, :, None]
    Ho, Wo = (H - P) // stride + 1, (W - Q) // stride + 1
    return z.reshape(B, F, Ho, Wo)


def _conv_input_grad(s, w, shape, stride):
    B, C, H, W = shape
    F, _, P, Q = w.shape
    cols = np.matmul(w.reshape(F, -1).T, s.reshape(B, F, -1))
    return kernels.col2im(np.ascontiguousarray(cols), C, H, W, P, Q, stride)


def _forward_record(layers, x):
    """Run the layer list, keeping each layer's input and the pooling switches."""
    acts = []
    a = x
    for layer in layers:
        acts.append(a)
        kind = layer[0]
        if kind == "conv":
            a = _conv_forward(a, layer[1], layer[2], layer[3])
        elif kind == "relu":
            a = np.maximum(a, 0.0)
        elif kind == "pool":
            a, arg = kernels.maxpool_forward(np.ascontiguousarray(a), layer[1])
            acts[-1] = (acts[-1], arg)
        elif kind == "flatten":
            a = a.reshape(a.shape[0], -1)
        elif kind == "linear":
            a = a @ layer[1] + (layer[2] if layer[2] is not None else 0.0)
        else:
            raise UnsupportedLayer(f"no relevance rule for layer {kind!r}")
    return acts, a


def propagate(layers, x, out_relevance, eps=1e-6):
    """Push output relevance (B, M) back to the input with the epsilon rule.

    Linear and conv layers: R_i = sum_j a_i w_ij / (z_j + eps*sign(z_j)) * R_j.
    ReLU passes relevance through; max-pooling hands it to the window's winner.
    """
    acts, logits = _forward_record(layers, x)
    R = np.asarray(out_relevance, dtype=np.float64)
    for layer, a in zip(reversed(layers), reversed(acts)):
        kind = layer[0]
        if kind == "linear":
            w, b = layer[1], layer[2]
            z = a @ w + (b if b is not None else 0.0)
            s = _safe_div(R, _stab(z, eps))
            R = a * (s @ w.T)
        elif kind == "conv":
            w, b, stride = layer[1], layer[2], layer[3]
            z = _conv_forward(a, w, b, stride)
            s = _safe_div(R, _stab(z, eps))
            R = a * _conv_input_grad(s, w, a.shape, stride)
        elif kind == "relu":
            pass
        elif kind == "pool":
            inp, arg = a
            R = kernels.maxpool_backward(np.ascontiguousarray(R), arg, layer[1], inp.shape[2], inp.shape[3])
        elif kind == "flatten":
            R = R.reshape(a.shape)
        else:
            raise UnsupportedLayer(f"no relevance rule for layer {kind!r}")
    return R, logits


def _prepare(net, x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = x.ndim == 3
    return (x[None] if single else x), single


def _check_targets(targets, M):
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if np.any(targets < 0) or np.any(targets >= M):
        raise ValueError(f"target out of range for {M} classes")
    return targets


def lrp_batch(net, x, targets, eps=1e-6):
    """Relevance of every input in a batch (B, C, H, W) for its target class."""
    layers = net.layers()
    xb, _ = _prepare(net, x)
    _, logits = _forward_record(layers, xb)
    B, M = logits.shape
    targets = _check_targets(targets, M)
    if len(targets) == 1 and B > 1:
        targets = np.repeat(targets, B)
    R0 = np.zeros((B, M))
    R0[np.arange(B), targets] = logits[np.arange(B), targets]
    R, _ = propagate(layers, xb, R0, eps)
    return R, logits[np.arange(B), targets]


def lrp(net, x, target, eps=1e-6):
    """Relevance map for one image: the target logit, redistributed layer by layer to the pixels."""
    xb, _ = _prepare(net, x)
    R, S = lrp_batch(net, xb, [target], eps)
    return RelevanceMap(R[0], int(target), "epsilon", eps, float(S[0]))


def clrp_batch(net, x, targets, eps=1e-6):
    layers = net.layers()
    xb, _ = _prepare(net, x)
    _, logits = _forward_record(layers, xb)
    B, M = logits.shape
    if M < 2:
        raise ValueError("contrastive relevance needs at least two classes")
    targets = _check_targets(targets, M)
    if len(targets) == 1 and B > 1:
        targets = np.repeat(targets, B)
    rows = np.arange(B)
    S = logits[rows, targets]
    R0 = np.zeros((B, M))
    R0[rows, targets] = S
    dual = np.repeat((S / (M - 1))[:, None], M, axis=1)
    dual[rows, targets] = 0.0
    R, _ = propagate(layers, xb, R0, eps)
    Rd, _ = propagate(layers, xb, dual, eps)
    return np.maximum(0.0, R - Rd), S


def clrp(net, x, target, eps=1e-6):
    """max(0, R - R_dual), the dual spreading the target score evenly over all other classes."""
    xb, _ = _prepare(net, x)
    R, S = clrp_batch(net, xb, [target], eps)
    return RelevanceMap(R[0], int(target), "clrp-epsilon", eps, float(S[0]))


def box_contains(box, r, c):
    r0, c0, r1, c1 = box
    return r0 <= r <= r1 and c0 <= c <= c1


def pointing_game(maps, boxes):
    """Fraction of maps whose maximum pixel lies inside the (inclusive) box.

    Ties resolve to the first maximum in row-major order. Returns (rate, hits, total).
    """
    maps = list(maps)
    boxes = list(boxes)
    if not maps:
        raise ValueError("pointing game needs at least one map")
    if len(maps) != len(boxes):
        raise ValueError(f"{len(maps)} maps but {len(boxes)} boxes")
    hits = 0
    for m, box in zip(maps, boxes):
        px = m.pixels if isinstance(m, RelevanceMap) else np.asarray(m)
        if px.ndim == 3:
            px = px.sum(axis=0)
        H, W = px.shape
        r0, c0, r1, c1 = box
        if not (0 <= r0 <= r1 < H and 0 <= c0 <= c1 < W):
            raise ValueError(f"box {box} outside {H}x{W} image")
        r, c = divmod(int(np.argmax(px)), W)
        hits += box_contains(box, r, c)
    return hits / len(maps), hits, len(maps)


def ablation_curve(net, x, rmap, k_steps=10):
    """Zero the most relevant pixels in k_steps increments and track the target logit.

    Returns [(fraction_removed, score), ...] for fractions 0, 1/k, ..., 1.
    Pixel order: descending relevance, ties by row-major index.
    """
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    xb, _ = _prepare(net, x)
    x0 = xb[0]
    px = rmap.pixels if isinstance(rmap, RelevanceMap) else np.asarray(rmap)
    target = rmap.target if isinstance(rmap, RelevanceMap) else None
    if target is None:
        raise ValueError("ablation needs the map's target class")
    H, W = px.shape
    order = np.argsort(-px.reshape(-1), kind="stable")
    total = H * W
    batch = np.empty((k_steps + 1, *x0.shape))
    fracs = []
    for step in range(k_steps + 1):
        k = step * total // k_steps
        img = x0.copy()
        rr, cc = np.divmod(order[:k], W)
        img[:, rr, cc] = 0.0
        batch[step] = img
        fracs.append(k / total)
    with no_grad():
        scores = net.scores(Tensor(batch)).data[:, target]
    return list(zip(fracs, scores.tolist()))


def curve_area(curve):
    f = np.array([c[0] for c in curve])
    s = np.array([c[1] for c in curve])
    return float(np.sum((f[1:] - f[:-1]) * (s[1:] + s[:-1]) / 2.0))


def random_map(shape, seed, target):
    rng = np.random.default_rng(seed)
    return RelevanceMap(rng.random(shape), int(target), "random", 0.0)


# ---------------------------------------------------------------- writers


def to_gray(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path, a):
    """Binary PGM (P5), values min-max scaled to 0..255."""
    a = np.asarray(a)
    if a.ndim == 3:
        a = a.sum(axis=0)
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_gray(a).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_csv(path, a):
    """Raw values, one image row per line, 9 significant digits."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a.sum(axis=0)
    with open(path, "w") as fh:
        for row in np.atleast_2d(a):
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_csv(path):
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
