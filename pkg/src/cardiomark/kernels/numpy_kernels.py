"""Pure-numpy kernel backend.

float32 convolution goes through im2col + one batched BLAS matmul.  The
float64 path instead accumulates shifted slabs in (ci, dy, dx) order, which
reproduces a direct nested-loop convolution bit for bit; float64 exists only
for reference/gradient-check runs, so ordered summation beats raw speed there.
"""

import numpy as np


def _pad1(x):
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def _im2col(xp, H, W):
    # (B, C*9, H*W) patch matrix from a 1-padded input, kernel offsets row-major
    B, C = xp.shape[:2]
    sB, sC, sH, sW = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, 3, 3, H, W),
        strides=(sB, sC, sH, sW, sH, sW),
        writeable=False,
    )
    return np.ascontiguousarray(patches).reshape(B, C * 9, H * W)


def conv3x3_forward(x, w, b):
    B, Ci, H, W = x.shape
    Co = w.shape[0]
    xp = _pad1(x)
    if x.dtype == np.float64:
        out = np.empty((B, Co, H, W), dtype=x.dtype)
        for co in range(Co):
            acc = np.full((B, H, W), b[co], dtype=x.dtype)
            for ci in range(Ci):
                for dy in range(3):
                    for dx in range(3):
                        acc += xp[:, ci, dy : dy + H, dx : dx + W] * w[co, ci, dy, dx]
            out[:, co] = acc
        return out
    cols = _im2col(xp, H, W)
    wmat = w.reshape(Co, Ci * 9)
    out = np.matmul(wmat[None, :, :], cols)
    out += b[None, :, None]
    return out.reshape(B, Co, H, W)


def conv3x3_backward(x, w, gy, need_input_grad=True):
    B, Ci, H, W = x.shape
    Co = w.shape[0]
    n = H * W
    gy_mat = gy.reshape(B, Co, n)
    cols = _im2col(_pad1(x), H, W)

    gb = gy.sum(axis=(0, 2, 3))
    gw = np.matmul(gy_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    gx = None
    if need_input_grad:
        gcols = np.matmul(w.reshape(Co, Ci * 9).T[None, :, :], gy_mat)
        gcols = gcols.reshape(B, Ci, 3, 3, H, W)
        gxp = np.zeros((B, Ci, H + 2, W + 2), dtype=gy.dtype)
        for dy in range(3):
            for dx in range(3):
                gxp[:, :, dy : dy + H, dx : dx + W] += gcols[:, :, dy, dx]
        gx = gxp[:, :, 1:-1, 1:-1]
    return gx, gw, gb


def maxpool2_forward(x):
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    blocks = (
        x.reshape(B, C, H2, 2, W2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H2, W2, 4)
    )
    sel = blocks.argmax(axis=-1).astype(np.uint8)  # first max in row-major block order
    y = np.take_along_axis(blocks, sel[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, sel


def maxpool2_backward(sel, gy):
    B, C, H2, W2 = gy.shape
    blocks = np.zeros((B, C, H2, W2, 4), dtype=gy.dtype)
    np.put_along_axis(blocks, sel[..., None].astype(np.intp), gy[..., None], axis=-1)
    return (
        blocks.reshape(B, C, H2, W2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H2 * 2, W2 * 2)
    )
