"""Numba kernel backend: parallel direct loops for the 3x3 conv and 2x2 pool.

fastmath stays off so float64 results match a direct nested-loop reference
exactly (no FMA contraction, no reassociation) and runs are reproducible.
Loop bodies are written against contiguous row views so LLVM can vectorize
them without reassociation; reductions accumulate into per-row buffers first.
Parallelism is over independent output slices only, so results do not depend
on the thread count.
"""

import os

import numpy as np

# prefer OpenMP outright: the TBB probe warns on older TBB builds
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange


@njit(parallel=True, cache=True)
def _conv_fwd(xp, w, b):
    # per output element the taps accumulate in (ci, dy, dx) order, exactly
    # like a direct nested loop over the definition
    B, Ci, Hp, Wp = xp.shape
    Co = w.shape[0]
    H, W = Hp - 2, Wp - 2
    out = np.empty((B, Co, H, W), dtype=xp.dtype)
    for bc in prange(B * Co):
        bi = bc // Co
        co = bc % Co
        acc = out[bi, co]
        for i in range(H):
            row = acc[i]
            for j in range(W):
                row[j] = b[co]
        for ci in range(Ci):
            xplane = xp[bi, ci]
            wk = w[co, ci]
            w00, w01, w02 = wk[0, 0], wk[0, 1], wk[0, 2]
            w10, w11, w12 = wk[1, 0], wk[1, 1], wk[1, 2]
            w20, w21, w22 = wk[2, 0], wk[2, 1], wk[2, 2]
            for i in range(H):
                arow = acc[i]
                x0 = xplane[i]
                x1 = xplane[i + 1]
                x2 = xplane[i + 2]
                for j in range(W):
                    arow[j] += x0[j] * w00
                    arow[j] += x0[j + 1] * w01
                    arow[j] += x0[j + 2] * w02
                    arow[j] += x1[j] * w10
                    arow[j] += x1[j + 1] * w11
                    arow[j] += x1[j + 2] * w12
                    arow[j] += x2[j] * w20
                    arow[j] += x2[j + 1] * w21
                    arow[j] += x2[j + 2] * w22
    return out


@njit(parallel=True, cache=True)
def _conv_bwd_input(gyp, w):
    # full correlation with the spatially flipped, channel-transposed kernel
    B, Co, Hp, Wp = gyp.shape
    Ci = w.shape[1]
    H, W = Hp - 2, Wp - 2
    gx = np.zeros((B, Ci, H, W), dtype=gyp.dtype)
    for bc in prange(B * Ci):
        bi = bc // Ci
        ci = bc % Ci
        acc = gx[bi, ci]
        for co in range(Co):
            gplane = gyp[bi, co]
            wk = w[co, ci]
            w00, w01, w02 = wk[2, 2], wk[2, 1], wk[2, 0]
            w10, w11, w12 = wk[1, 2], wk[1, 1], wk[1, 0]
            w20, w21, w22 = wk[0, 2], wk[0, 1], wk[0, 0]
            for i in range(H):
                arow = acc[i]
                g0 = gplane[i]
                g1 = gplane[i + 1]
                g2 = gplane[i + 2]
                for j in range(W):
                    arow[j] += g0[j] * w00
                    arow[j] += g0[j + 1] * w01
                    arow[j] += g0[j + 2] * w02
                    arow[j] += g1[j] * w10
                    arow[j] += g1[j + 1] * w11
                    arow[j] += g1[j + 2] * w12
                    arow[j] += g2[j] * w20
                    arow[j] += g2[j + 1] * w21
                    arow[j] += g2[j + 2] * w22
    return gx


@njit(parallel=True, cache=True)
def _conv_bwd_weight(xp, gy):
    # per-row partial sums keep the inner loop store-independent (SIMD-able
    # without reassociation); the final tap sums are short reductions
    B, Ci = xp.shape[0], xp.shape[1]
    Co, H, W = gy.shape[1], gy.shape[2], gy.shape[3]
    gw = np.empty((Co, Ci, 3, 3), dtype=gy.dtype)
    gb = np.empty(Co, dtype=gy.dtype)
    for co in prange(Co):
        rowacc = np.zeros(W, dtype=gy.dtype)
        for bi in range(B):
            gplane = gy[bi, co]
            for i in range(H):
                grow = gplane[i]
                for j in range(W):
                    rowacc[j] += grow[j]
        gb[co] = rowacc.sum()
        racc = np.zeros((9, W), dtype=gy.dtype)
        for ci in range(Ci):
            for t in range(9):
                for j in range(W):
                    racc[t, j] = 0.0
            for bi in range(B):
                gplane = gy[bi, co]
                xplane = xp[bi, ci]
                for i in range(H):
                    grow = gplane[i]
                    x0 = xplane[i]
                    x1 = xplane[i + 1]
                    x2 = xplane[i + 2]
                    r0, r1, r2 = racc[0], racc[1], racc[2]
                    r3, r4, r5 = racc[3], racc[4], racc[5]
                    r6, r7, r8 = racc[6], racc[7], racc[8]
                    for j in range(W):
                        g = grow[j]
                        r0[j] += g * x0[j]
                        r1[j] += g * x0[j + 1]
                        r2[j] += g * x0[j + 2]
                        r3[j] += g * x1[j]
                        r4[j] += g * x1[j + 1]
                        r5[j] += g * x1[j + 2]
                        r6[j] += g * x2[j]
                        r7[j] += g * x2[j + 1]
                        r8[j] += g * x2[j + 2]
            for dy in range(3):
                for dx in range(3):
                    gw[co, ci, dy, dx] = racc[dy * 3 + dx].sum()
    return gw, gb


@njit(parallel=True, cache=True)
def _pool_fwd(x):
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    y = np.empty((B, C, H2, W2), dtype=x.dtype)
    sel = np.empty((B, C, H2, W2), dtype=np.uint8)
    for bc in prange(B * C):
        bi = bc // C
        c = bc % C
        for i in range(H2):
            for j in range(W2):
                best = x[bi, c, 2 * i, 2 * j]
                k = np.uint8(0)
                for dy in range(2):
                    for dx in range(2):
                        v = x[bi, c, 2 * i + dy, 2 * j + dx]
                        if v > best:  # strict: ties keep the first in row-major order
                            best = v
                            k = np.uint8(dy * 2 + dx)
                y[bi, c, i, j] = best
                sel[bi, c, i, j] = k
    return y, sel


@njit(parallel=True, cache=True)
def _pool_bwd(sel, gy):
    B, C, H2, W2 = gy.shape
    gx = np.zeros((B, C, H2 * 2, W2 * 2), dtype=gy.dtype)
    for bc in prange(B * C):
        bi = bc // C
        c = bc % C
        for i in range(H2):
            for j in range(W2):
                k = sel[bi, c, i, j]
                gx[bi, c, 2 * i + k // 2, 2 * j + k % 2] = gy[bi, c, i, j]
    return gx


def _pad1(x):
    B, C, H, W = x.shape
    xp = np.empty((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    xp[:, :, 0, :] = 0
    xp[:, :, -1, :] = 0
    xp[:, :, :, 0] = 0
    xp[:, :, :, -1] = 0
    return xp


def conv3x3_forward(x, w, b):
    return _conv_fwd(_pad1(x), w, b)


def conv3x3_backward(x, w, gy, need_input_grad=True):
    gx = _conv_bwd_input(_pad1(gy), w) if need_input_grad else None
    gw, gb = _conv_bwd_weight(_pad1(x), gy)
    return gx, gw, gb


def maxpool2_forward(x):
    return _pool_fwd(x)


def maxpool2_backward(sel, gy):
    return _pool_bwd(sel, gy)
