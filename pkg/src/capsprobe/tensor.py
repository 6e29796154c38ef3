"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable function below records a :class:`Node` on the output
tensor. :func:`backward` orders the recorded nodes into a :class:`Tape`
(inputs before outputs) and walks it once in reverse.

Broadcasting is deliberately absent except between a tensor and a scalar;
use :func:`broadcast_to` to expand explicitly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


_GRAD_ENABLED = True
_DEBUG = False
_OPS = 0  # every op output passes through _make


def op_count() -> int:
    """Number of tensor operations executed so far in this process."""
    return _OPS


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    # keep numpy from hijacking the reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False, node=None):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = node
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(arr, parents, backward_fn, op):
    global _OPS
    _OPS += 1
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output from op {op!r}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor._wrap(arr)
    return Tensor._wrap(arr, True, Node(op, tuple(parents), backward_fn))


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Nodes in topological order: every node's inputs appear before it."""

    entries: list = field(default_factory=list)
    visits: int = 0

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)


LAST_TAPE: Tape | None = None


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every differentiable tensor feeding ``loss``."""
    global LAST_TAPE
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss is detached from any differentiable input")
    if loss.node is not None and loss.node.consumed:
        raise BackwardError("backward already ran on this graph; rebuild the forward pass")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.entries):
        tape.visits += 1
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        t.grad = g
        node = t.node
        if node.consumed:
            raise BackwardError(f"graph through op {node.op!r} was already consumed")
        in_grads = node.backward_fn(g)
        for p, pg in zip(node.inputs, in_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ShapeError(f"op {node.op!r} produced grad {pg.shape} for input {p.data.shape}")
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
        node.consumed = True
        node.backward_fn = None
    LAST_TAPE = tape
    return tape


# ---------------------------------------------------------------- elementwise


def _scalar_like(x):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 0:
        raise ShapeError(f"implicit broadcasting is not supported (operand shape {arr.shape}); wrap it in a Tensor")
    return Tensor(arr)


def _check_pair(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; use broadcast_to explicitly")


def _reduce_to(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _scalar_like(a), _scalar_like(b)
    _check_pair(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b):
    a, b = _scalar_like(a), _scalar_like(b)
    _check_pair(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _scalar_like(a), _scalar_like(b)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)), "mul")


def div(a, b):
    a, b = _scalar_like(a), _scalar_like(b)
    _check_pair(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (_reduce_to(g / bd, a.shape), _reduce_to(-g * out / bd, b.shape)), "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a):
    # tanh approximation
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw, "gelu")


def clamp_min(a, lo):
    """max(a, lo) elementwise; gradient passes where a > lo."""
    mask = a.data > lo
    return _make(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------- shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = a.data.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    """Explicit numpy-style expansion; the backward sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), bw, "broadcast_to")


def index(a, idx):
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), bw, "index")


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """(m, k) @ (k, n); leading batch dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """x (B, in) @ w (in, out) + b (out,). The bias is added per row."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gb = g.sum(axis=0) if b is not None else None
        return (g @ wd.T, xd.T @ g) + ((gb,) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "linear")


def _einsum_operand_grad(g, out, other, other_arr, target, shape):
    """Gradient for one einsum operand; indices private to it come back by broadcasting."""
    avail = set(out) | set(other)
    kept = "".join(ch for ch in target if ch in avail)
    gr = np.einsum(f"{out},{other}->{kept}", g, other_arr, optimize=True)
    if kept != target:
        gr = gr.reshape([shape[i] if ch in avail else 1 for i, ch in enumerate(target)])
        gr = np.broadcast_to(gr, shape).copy()
    return gr


def einsum(spec, a, b):
    """Two-operand einsum. Each index may appear at most once per operand."""
    ins, outs = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ShapeError(f"einsum {spec!r}: operand ranks {a.ndim}, {b.ndim} do not match")
    dims = {}
    for s, arr in ((sa, a.data), (sb, b.data)):
        for ch, n in zip(s, arr.shape):
            if dims.setdefault(ch, n) != n:
                raise ShapeError(f"einsum {spec!r}: index {ch} has sizes {dims[ch]} and {n}")
    ad, bd = a.data, b.data
    out = np.einsum(spec, ad, bd, optimize=True)

    def bw(g):
        ga = _einsum_operand_grad(g, outs, sb, bd, sa, ad.shape) if a.requires_grad else None
        gb = _einsum_operand_grad(g, outs, sa, ad, sb, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.asarray(out), (a, b), bw, "einsum")


# ---------------------------------------------------------------- convolution and pooling


def conv2d(x, k, bias=None, stride=1):
    """Cross-correlation of x (C, H, W) or (B, C, H, W) with k (F, C, P, Q).

    out[f, i, j] = sum_{c,p,q} x[c, i*stride + p, j*stride + q] * k[f, c, p, q]
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    single = x.ndim == 3
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) or (B,C,H,W) input and (F,C,P,Q) kernel, got {x.shape}, {k.shape}")
    xd = x.data[None] if single else x.data
    B, C, H, W = xd.shape
    F, Ck, P, Q = k.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if P > H or Q > W:
        raise ShapeError(f"conv2d: kernel {P}x{Q} larger than input {H}x{W}")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({F},)")
    Ho = (H - P) // stride + 1
    Wo = (W - Q) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(xd), P, Q, stride)  # (B, CPQ, L)
    kmat = k.data.reshape(F, -1)
    out = np.matmul(kmat, cols)  # (B, F, L)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, F, Ho, Wo)
    if single:
        out = out[0]

    def bw(g):
        g = g.reshape(B, F, Ho * Wo)
        gk = np.einsum("bfl,bkl->fk", g, cols, optimize=True).reshape(k.shape)
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(np.matmul(kmat.T, g))
            gx = kernels.col2im(gcols, C, H, W, P, Q, stride)
            if single:
                gx = gx[0]
        res = (gx, gk)
        if bias is not None:
            res += (g.sum(axis=(0, 2)),)
        return res

    parents = (x, k) if bias is None else (x, k, bias)
    return _make(out, parents, bw, "conv2d")


def max_pool(x, s):
    """Non-overlapping s x s max pooling over the last two axes."""
    if s < 1:
        raise ValueError("pool size must be positive")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"max_pool: expected rank 3 or 4, got {x.shape}")
    xd = x.data[None] if single else x.data
    B, C, H, W = xd.shape
    if H % s or W % s:
        raise ShapeError(f"max_pool: size {s} does not divide {H}x{W}")
    out, arg = kernels.maxpool_forward(np.ascontiguousarray(xd), s)
    arg = np.ascontiguousarray(arg, dtype=np.int64)

    def bw(g):
        g4 = np.ascontiguousarray(g[None] if single else g)
        gx = kernels.maxpool_backward(g4, arg, s, H, W)
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), bw, "max_pool")


# ---------------------------------------------------------------- normalisation


def softmax(x, axis=-1):
    ax = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    ax = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({D},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xh).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def vector_norm(x, axis=-1):
    """Euclidean length along ``axis``; the gradient at the zero vector is taken as 0."""
    ax = _norm_axis(axis, x.ndim)[0]
    n = np.sqrt((x.data * x.data).sum(axis=ax))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        ratio = np.where(n > 0, g / safe, 0.0)
        return (x.data * np.expand_dims(ratio, ax),)

    return _make(n, (x,), bw, "vector_norm")


def squash(s, axis=-1):
    """v = |s|^2/(1+|s|^2) * s/|s|, with v = 0 at s = 0."""
    ax = _norm_axis(axis, s.ndim)[0]
    sd = s.data
    sq = (sd * sd).sum(axis=ax, keepdims=True)
    n = np.sqrt(sq)
    f = n / (1.0 + sq)  # zero at n = 0
    out = sd * f

    def bw(g):
        # d/ds [s f(n)] = f I + (f'(n)/n) s s^T,  f'(n) = (1 - n^2) / (1 + n^2)^2
        fp_over_n = np.where(n > 0, (1.0 - sq) / ((1.0 + sq) ** 2 * np.where(n > 0, n, 1.0)), 0.0)
        return (f * g + fp_over_n * (g * sd).sum(axis=ax, keepdims=True) * sd,)

    return _make(out, (s,), bw, "squash")


# ---------------------------------------------------------------- losses


def cross_entropy(logits, labels):
    """Mean negative log-likelihood. ``logits`` is (M,) with an int label or (B, M) with B labels."""
    single = logits.ndim == 1
    z = reshape(logits, (1, -1)) if single else logits
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    M = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {z.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= M):
        raise ValueError(f"label out of range for {M} classes")
    lp = log_softmax(z, axis=1)
    picked = index(lp, (np.arange(z.shape[0]), labels))
    return -mean(picked)


def mse(a, b):
    d = a - b
    return mean(d * d)


# ---------------------------------------------------------------- optimisation


def sgd_step(params, lr):
    """p <- p - lr * p.grad for every parameter, then clear the grads."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for p in params:
        if p.grad is None:
            raise BackwardError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
