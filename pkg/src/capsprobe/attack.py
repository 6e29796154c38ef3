"""White-box perturbations: FGSM, PGD, capsule-specific attacks, adversarial and natural patches.

All attacks are untargeted, work on batches (B, C, H, W) in [0, 1], and
check their constraint set (l-inf ball or patch mask, plus the [0, 1] box)
on every output.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .capsnet import margin_loss


class ConstraintViolation(AssertionError):
    pass


@dataclass
class ConstraintStats:
    checked: int = 0
    violations: int = 0

    def reset(self):
        self.checked = 0
        self.violations = 0


CONSTRAINTS = ConstraintStats()
_TOL = 1e-12


def _check_box(x_adv):
    return bool(np.all(x_adv >= 0.0) and np.all(x_adv <= 1.0))


def check_linf(x, x_adv, eps):
    ok = _check_box(x_adv) and bool(np.all(np.abs(x_adv - x) <= eps + _TOL))
    CONSTRAINTS.checked += 1
    if not ok:
        CONSTRAINTS.violations += 1
        raise ConstraintViolation(f"output leaves the l-inf ball of radius {eps} or the [0, 1] box")


def check_patch(x, x_adv, mask):
    ok = _check_box(x_adv) and bool(np.array_equal(x_adv[..., ~mask], x[..., ~mask]))
    CONSTRAINTS.checked += 1
    if not ok:
        CONSTRAINTS.violations += 1
        raise ConstraintViolation("output changes pixels outside the patch or leaves [0, 1]")


@dataclass(frozen=True)
class AttackBudget:
    eps: float
    alpha: float
    steps: int = 10
    random_start: bool = False
    norm: str = "linf"

    def __post_init__(self):
        if self.norm != "linf":
            raise ValueError(f"unsupported norm {self.norm!r}; only 'linf'")
        if not (np.isfinite(self.eps) and self.eps >= 0):
            raise ValueError(f"eps must be finite and >= 0, got {self.eps}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"step size must be finite and > 0, got {self.alpha}")
        if self.steps < 1:
            raise ValueError("step count must be >= 1")
        if self.eps > 0 and self.alpha > self.eps:
            warnings.warn(f"step size {self.alpha} exceeds eps {self.eps}", stacklevel=2)


@dataclass(frozen=True)
class PatchSpec:
    row: int
    col: int
    height: int
    width: int
    aligned: bool = False

    def mask(self, shape):
        """Boolean (H, W) mask; raises if the patch leaves the image."""
        H, W = shape[-2:]
        if self.height < 1 or self.width < 1 or self.row < 0 or self.col < 0 \
                or self.row + self.height > H or self.col + self.width > W:
            raise ValueError(f"patch {self} does not fit a {H}x{W} image")
        m = np.zeros((H, W), dtype=bool)
        m[self.row:self.row + self.height, self.col:self.col + self.width] = True
        return m


def aligned_patches(H, W, P):
    """Every P x P patch slot on the transformer's grid, row-major."""
    return [PatchSpec(r, c, P, P, True) for r in range(0, H - P + 1, P) for c in range(0, W - P + 1, P)]


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _loss_fn(model, loss):
    return loss if loss is not None else model.attack_loss


def input_gradient(model, x, y, loss=None):
    """d loss / d x for a batch; model parameter grads are cleared afterwards."""
    xt = T.Tensor(x, requires_grad=True)
    value = _loss_fn(model, loss)(xt, y)
    T.backward(value)
    for p in model.parameters():
        p.grad = None
    g = xt.grad
    if g is None:
        return np.zeros_like(x)
    if not np.all(np.isfinite(g)):
        raise T.NonFiniteError("non-finite input gradient")
    return g


def fgsm(model, x, y, eps, loss=None):
    """clip(x + eps * sign(grad), 0, 1)."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    xb, single = _as_batch(x)
    y = np.atleast_1d(y)
    if eps == 0:
        out = xb.copy()
    else:
        g = input_gradient(model, xb, y, loss)
        out = np.clip(xb + eps * np.sign(g), 0.0, 1.0)
    check_linf(xb, out, eps)
    return out[0] if single else out


def pgd(model, x, y, budget, loss=None, seed=0):
    """Iterated signed-gradient ascent, projected onto the eps-ball and [0, 1] after each step."""
    xb, single = _as_batch(x)
    y = np.atleast_1d(y)
    eps, alpha = budget.eps, budget.alpha
    if eps == 0:
        out = xb.copy()
        check_linf(xb, out, eps)
        return out[0] if single else out
    lo, hi = np.maximum(xb - eps, 0.0), np.minimum(xb + eps, 1.0)
    if budget.random_start:
        rng = np.random.default_rng(seed)
        x_adv = np.clip(xb + rng.uniform(-eps, eps, size=xb.shape), lo, hi)
    else:
        x_adv = xb.copy()
    for _ in range(budget.steps):
        g = input_gradient(model, x_adv, y, loss)
        x_adv = np.clip(x_adv + alpha * np.sign(g), lo, hi)
        check_linf(xb, x_adv, eps)
    return x_adv[0] if single else x_adv


def caps_attack(model, x, y, budget, seed=0):
    """PGD on the margin loss of the routed output capsules."""
    return pgd(model, x, y, budget, loss=lambda xt, yy: margin_loss(model.forward(xt), yy), seed=seed)


def vote_loss(model, x, y):
    """Margin loss on squash(mean of the votes over primary capsules): routing is bypassed."""
    u_hat = model.votes(x)  # (B, N, M, D)
    N = u_hat.shape[1]
    v = T.squash(T.sum_(u_hat, axis=1) * (1.0 / N))
    return margin_loss(v, y)


def vote_attack(model, x, y, budget, seed=0):
    if not hasattr(model, "votes"):
        raise TypeError("vote attack needs a capsule model exposing its votes")
    return pgd(model, x, y, budget, loss=lambda xt, yy: vote_loss(model, xt, yy), seed=seed)


PATCH_STEP = 8.0 / 255.0
PATCH_STEPS = 250


def patch_attack(model, x, y, patch, steps=PATCH_STEPS, lr=PATCH_STEP, loss=None, stop_on_success=True):
    """Unbounded signed-gradient ascent restricted to one patch; other pixels are untouched.

    With ``stop_on_success`` an image stops moving once the model misclassifies it.
    """
    xb, single = _as_batch(x)
    y = np.atleast_1d(y)
    mask = patch.mask(xb.shape)
    m = np.broadcast_to(mask, xb.shape[-2:]).astype(np.float64)
    x_adv = xb.copy()
    active = np.arange(len(xb))
    for _ in range(steps):
        if stop_on_success:
            active = np.flatnonzero(model.predict(x_adv) == y)
            if not len(active):
                break
        # per-image gradients are independent, so only still-correct images need one
        g = input_gradient(model, x_adv[active], y[active], loss)
        x_adv[active] = np.clip(x_adv[active] + lr * np.sign(g) * m, 0.0, 1.0)
        x_adv[..., ~mask] = xb[..., ~mask]
    check_patch(xb, x_adv, mask)
    return x_adv[0] if single else x_adv


CORRUPTIONS = ("gaussian-noise", "mean-shift", "blackout")


def noise_sigma(severity):
    return 0.04 * severity


def patch_corrupt(x, patch, kind, severity, seed):
    """Natural corruption inside the patch only, clipped to [0, 1], deterministic in ``seed``."""
    if kind not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {kind!r}; expected one of {CORRUPTIONS}")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity must be in 1..5, got {severity}")
    if kind == "blackout" and severity != 5:
        raise ValueError("blackout is defined at severity 5 only")
    xb, single = _as_batch(x)
    mask = patch.mask(xb.shape)
    rng = np.random.default_rng(seed)
    out = xb.copy()
    region = out[..., mask]
    if kind == "gaussian-noise":
        region = region + rng.normal(0.0, noise_sigma(severity), size=region.shape)
    elif kind == "mean-shift":
        signs = rng.choice([-1.0, 1.0], size=(len(xb),) + (1,) * (region.ndim - 1))
        region = region + signs * 0.1 * severity
    else:
        region = np.zeros_like(region)
    out[..., mask] = np.clip(region, 0.0, 1.0)
    check_patch(xb, out, mask)
    return out[0] if single else out


def success_rate(model, x, y, x_adv):
    """Share of clean-correct inputs that the perturbation flips. Returns (rate, flipped, denominator)."""
    y = np.atleast_1d(y)
    clean = model.predict(x) == y
    denom = int(clean.sum())
    if denom == 0:
        return 0.0, 0, 0
    flipped = int(np.sum(clean & (model.predict(x_adv) != y)))
    return flipped / denom, flipped, denom
