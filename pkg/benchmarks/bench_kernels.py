"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel: best-of-N wall time for each backend and the ratio.
"""

import argparse
import time

import numpy as np

from capsprobe import _fallback, kernels
from capsprobe.capsnet import CapsConfig, DRCapsNet
from capsprobe.convnet import ConvNet
from capsprobe.tensor import Tensor, no_grad


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    x = rng.standard_normal((32, 8, 24, 24))
    cols = _fallback.im2col(x, 5, 5, 1)
    pooled, arg = _fallback.maxpool_forward(x, 2)
    g = rng.standard_normal(pooled.shape)
    u_hat = rng.standard_normal((32, 512, 3, 16))
    return {
        "im2col 32x8x24x24 k5": lambda impl: impl.im2col(x, 5, 5, 1),
        "col2im 32x8x24x24 k5": lambda impl: impl.col2im(cols, 8, 24, 24, 5, 5, 1),
        "maxpool fwd 32x8x24x24": lambda impl: impl.maxpool_forward(x, 2),
        "maxpool bwd 32x8x24x24": lambda impl: impl.maxpool_backward(g, arg, 2, 24, 24),
        "route 32x512x3x16 K=3": lambda impl: impl.route(u_hat, 3),
    }


def model_cases(rng):
    x = rng.uniform(0, 1, (64, 1, 28, 28))
    conv, caps = ConvNet(), DRCapsNet(CapsConfig())

    def fwd(model):
        with no_grad():
            model.forward(Tensor(x))

    return {"convnet forward b64": lambda: fwd(conv), "capsnet forward b64": lambda: fwd(caps)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in kernels.available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    from capsprobe import _kernels

    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'cython ms':>12}{'numpy ms':>12}{'numpy/cython':>14}")
    for name, fn in cases(rng).items():
        tc = best_of(lambda: fn(_kernels), args.repeat)
        tn = best_of(lambda: fn(_fallback), args.repeat)
        print(f"{name:<28}{tc * 1e3:>12.2f}{tn * 1e3:>12.2f}{tn / tc:>14.2f}")
    for name, fn in model_cases(rng).items():
        kernels.use("cython")
        tc = best_of(fn, args.repeat)
        kernels.use("numpy")
        tn = best_of(fn, args.repeat)
        kernels.use("cython")
        print(f"{name:<28}{tc * 1e3:>12.2f}{tn * 1e3:>12.2f}{tn / tc:>14.2f}")


if __name__ == "__main__":
    main()
