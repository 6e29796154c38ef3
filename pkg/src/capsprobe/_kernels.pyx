# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: patch gather/scatter for convolution, max pooling, routing."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND = "cython"


def im2col(const double[:, :, :, ::1] x, Py_ssize_t P, Py_ssize_t Q, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - P) // stride + 1, Wo = (W - Q) // stride + 1
    out_arr = np.empty((B, C * P * Q, Ho * Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, p, q, i, j, row, r0
    for b in range(B):
        for c in range(C):
            for p in range(P):
                for q in range(Q):
                    row = (c * P + p) * Q + q
                    for i in range(Ho):
                        r0 = i * Wo
                        for j in range(Wo):
                            out[b, row, r0 + j] = x[b, c, i * stride + p, j * stride + q]
    return out_arr


def col2im(const double[:, :, ::1] cols, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           Py_ssize_t P, Py_ssize_t Q, Py_ssize_t stride):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Ho = (H - P) // stride + 1, Wo = (W - Q) // stride + 1
    dx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, p, q, i, j, row, r0
    for b in range(B):
        for c in range(C):
            for p in range(P):
                for q in range(Q):
                    row = (c * P + p) * Q + q
                    for i in range(Ho):
                        r0 = i * Wo
                        for j in range(Wo):
                            dx[b, c, i * stride + p, j * stride + q] += cols[b, row, r0 + j]
    return dx_arr


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t s):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // s, Wo = W // s
    out_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    arg_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, i, j, p, q
    cdef double best, val
    cdef long long best_k
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[b, c, i * s, j * s]
                    best_k = 0
                    for p in range(s):
                        for q in range(s):
                            val = x[b, c, i * s + p, j * s + q]
                            # strict comparison keeps the first row-major maximum
                            if val > best:
                                best = val
                                best_k = p * s + q
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = best_k
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] g, const long long[:, :, :, ::1] arg,
                     Py_ssize_t s, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    dx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j
    cdef long long k
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    k = arg[b, c, i, j]
                    dx[b, c, i * s + k // s, j * s + k % s] += g[b, c, i, j]
    return dx_arr


def route(const double[:, :, :, ::1] u_hat, int iters):
    """Agreement routing on a fixed vote tensor (B, N, M, D).

    Returns the coupling coefficients used at every iteration, shape
    (iters, B, N, M), and the final output capsules (B, M, D).
    """
    cdef Py_ssize_t B = u_hat.shape[0], N = u_hat.shape[1], M = u_hat.shape[2], D = u_hat.shape[3]
    hist_arr = np.empty((iters, B, N, M), dtype=np.float64)
    v_arr = np.zeros((B, M, D), dtype=np.float64)
    cdef double[:, :, :, ::1] hist = hist_arr
    cdef double[:, :, ::1] v = v_arr
    cdef double[:, ::1] logits = np.zeros((N, M), dtype=np.float64)
    cdef double[:, ::1] s = np.zeros((M, D), dtype=np.float64)
    cdef Py_ssize_t b, n, m, d
    cdef int it
    cdef double mx, tot, sq, scale, agree
    for b in range(B):
        logits[:, :] = 0.0
        for it in range(iters):
            for n in range(N):
                mx = logits[n, 0]
                for m in range(1, M):
                    if logits[n, m] > mx:
                        mx = logits[n, m]
                tot = 0.0
                for m in range(M):
                    hist[it, b, n, m] = exp(logits[n, m] - mx)
                    tot += hist[it, b, n, m]
                for m in range(M):
                    hist[it, b, n, m] /= tot
            s[:, :] = 0.0
            for n in range(N):
                for m in range(M):
                    for d in range(D):
                        s[m, d] += hist[it, b, n, m] * u_hat[b, n, m, d]
            for m in range(M):
                sq = 0.0
                for d in range(D):
                    sq += s[m, d] * s[m, d]
                if sq > 0.0:
                    scale = sqrt(sq) / (1.0 + sq)
                else:
                    scale = 0.0
                for d in range(D):
                    v[b, m, d] = s[m, d] * scale
            if it < iters - 1:
                for n in range(N):
                    for m in range(M):
                        agree = 0.0
                        for d in range(D):
                            agree += v[b, m, d] * u_hat[b, n, m, d]
                        logits[n, m] += agree
    return hist_arr, v_arr
