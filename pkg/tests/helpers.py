"""Central finite differences against the tape's gradients."""

import numpy as np

from capsprobe import tensor as T


def numeric_grad(f, arrays, i, h=1e-5):
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[i])
    it = np.nditer(base[i], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i][idx] += h
        minus[i][idx] -= h
        with T.no_grad():
            fp = f(*[T.Tensor(a) for a in plus]).item()
            fm = f(*[T.Tensor(a) for a in minus]).item()
        g[idx] = (fp - fm) / (2 * h)
    return g


def analytic_grads(f, arrays):
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.backward(f(*ts))
    return [t.grad for t in ts]


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def gradcheck(f, arrays, h=1e-5):
    """Largest relative error over every input of scalar function ``f``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    analytic = analytic_grads(f, arrays)
    return max(rel_err(analytic[i], numeric_grad(f, arrays, i, h)) for i in range(len(arrays)))


def probe(shape, seed):
    """Fixed random weights turning any tensor output into a scalar."""
    return np.random.default_rng(seed + 1000).uniform(-1, 1, size=shape)


def weighted_sum(out, seed=0):
    return T.sum_(out * T.Tensor(probe(out.shape, seed)))


# acceptance criterion number -> one-line verdict, echoed in the terminal summary
ACCEPTANCE = {}
