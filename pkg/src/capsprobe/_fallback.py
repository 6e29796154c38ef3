"""Pure numpy versions of the compiled kernels. Same signatures, same results."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def im2col(x, P, Q, stride):
    B, C, H, W = x.shape
    Ho = (H - P) // stride + 1
    Wo = (W - Q) // stride + 1
    win = sliding_window_view(x, (P, Q), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (B, C, Ho, Wo, P, Q) -> (B, C, P, Q, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * P * Q, Ho * Wo)


def col2im(cols, C, H, W, P, Q, stride):
    B = cols.shape[0]
    Ho = (H - P) // stride + 1
    Wo = (W - Q) // stride + 1
    c6 = cols.reshape(B, C, P, Q, Ho, Wo)
    dx = np.zeros((B, C, H, W))
    for p in range(P):
        for q in range(Q):
            dx[:, :, p:p + stride * (Ho - 1) + 1:stride, q:q + stride * (Wo - 1) + 1:stride] += c6[:, :, p, q]
    return dx


def maxpool_forward(x, s):
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // s, s, W // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // s, W // s, s * s)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(g, arg, s, H, W):
    B, C, Ho, Wo = g.shape
    onehot = np.zeros((B, C, Ho, Wo, s * s))
    np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
    return onehot.reshape(B, C, Ho, Wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)


def route(u_hat, iters):
    B, N, M, D = u_hat.shape
    logits = np.zeros((B, N, M))
    hist = np.empty((iters, B, N, M))
    v = np.zeros((B, M, D))
    for it in range(iters):
        z = np.exp(logits - logits.max(axis=2, keepdims=True))
        c = z / z.sum(axis=2, keepdims=True)
        hist[it] = c
        s = np.einsum("bnm,bnmd->bmd", c, u_hat)
        sq = np.sum(s * s, axis=-1, keepdims=True)
        scale = np.divide(np.sqrt(sq), 1.0 + sq, out=np.zeros_like(sq), where=sq > 0)
        v = s * scale
        if it < iters - 1:
            logits = logits + np.einsum("bmd,bnmd->bnm", v, u_hat)
    return hist, v
