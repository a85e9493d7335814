"""Minimal dense-tensor engine with reverse-mode differentiation.

Exactly the operator set the landmark U-Net and its losses need: 3x3/stride-1/
pad-1 convolution, batch norm, leaky ReLU, 2x2 max-pool, 2x nearest-neighbor
upsample, channel concat, per-pixel channel softmax, KL and soft-Dice losses,
plus elementwise add/mul and a full sum for tests.

Tensors are float32 by default; float64 is supported for reference runs and
gradient checks.  A backward pass walks the recorded graph in reverse
topological order, visiting each node exactly once; gradients accumulate
until :func:`zero_grads` (or ``Tensor.grad = None``).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError, NumericError, StateError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)
_LOG_CLAMP = 1e-12
_DICE_EPS = 1e-5


class Tensor:
    """Dense tensor (order <= 4, convention B x C x H x W) with optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        if self.data.ndim > 4:
            raise ConfigError(f"tensor order {self.data.ndim} > 4 not supported")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _result(data, parents, op, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def topo_order(root):
    """Nodes of the graph rooted at `root`, parents before children."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate grads of every requires_grad leaf reachable from `loss`.

    Each graph node is visited exactly once; leaf grads accumulate across
    repeated calls until cleared.  `loss` must be a scalar.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = topo_order(loss)
    for node in order:
        if node.requires_grad and node._backward_fn is None and node.grad is None:
            node.grad = np.zeros_like(node.data)
    if not loss.requires_grad:
        return
    upstream = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad += g
            continue
        for parent, pg in node._backward_fn(g):
            if not parent.requires_grad:
                continue
            if id(parent) in upstream:
                upstream[id(parent)] = upstream[id(parent)] + pg
            else:
                upstream[id(parent)] = pg


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _check_finite(arr, what):
    # a single sum taints to nan/inf if any element is non-finite
    if not math.isfinite(float(np.sum(arr, dtype=np.float64))):
        raise NumericError(f"non-finite values in {what}")


def conv2d(x, w, b):
    """3x3 convolution, stride 1, zero-padding 1; spatial extents preserved."""
    if x.data.ndim != 4:
        raise ConfigError(f"conv2d input must be B,C,H,W; got shape {x.shape}")
    if w.data.shape[-2:] != (3, 3) or w.data.ndim != 4:
        raise ConfigError(f"conv2d weight must be Cout,Cin,3,3; got {w.shape}")
    if w.data.shape[1] != x.data.shape[1]:
        raise ConfigError(
            f"conv2d channel mismatch: input {x.data.shape[1]}, weight {w.data.shape[1]}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise ConfigError(f"conv2d bias shape {b.shape} != ({w.data.shape[0]},)")
    _check_finite(x.data, "conv2d input")
    _check_finite(w.data, "conv2d weight")
    y = K.conv3x3_forward(x.data, w.data, b.data)

    def bw(gy):
        gx, gw, gb = K.conv3x3_backward(
            x.data, w.data, gy, need_input_grad=x.requires_grad
        )
        out = [(w, gw), (b, gb)]
        if x.requires_grad:
            out.append((x, gx))
        return out

    return _result(y, (x, w, b), "conv2d", bw)


@dataclass
class BatchNormState:
    """Per-channel running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    count: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def new(cls, channels, dtype=np.float32):
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def copy(self):
        return BatchNormState(
            self.running_mean.copy(), self.running_var.copy(),
            self.count, self.momentum, self.eps,
        )


def batch_norm(x, gamma, beta, state, mode):
    """Channel batch norm; train mode uses batch stats and updates `state`."""
    if mode not in ("train", "eval"):
        raise UsageError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    B, C, H, W = x.data.shape
    n = B * H * W
    if mode == "train":
        if n < 2:
            raise ConfigError(f"batch_norm train mode needs >= 2 values per channel, got {n}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[:] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[:] = (1.0 - m) * state.running_var + m * var
        state.count += 1
    else:
        if state.count == 0:
            raise StateError("batch_norm eval mode with uninitialized running stats")
        mean = state.running_mean
        var = state.running_var
    ivar = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    y = y.astype(x.data.dtype, copy=False)

    def bw(gy):
        dbeta = gy.sum(axis=(0, 2, 3))
        dgamma = (gy * xhat).sum(axis=(0, 2, 3))
        scale = (gamma.data * ivar)[None, :, None, None]
        if mode == "train":
            gx = scale * (
                gy
                - dbeta[None, :, None, None] / n
                - xhat * dgamma[None, :, None, None] / n
            )
        else:
            gx = scale * gy
        return [(x, gx.astype(x.data.dtype, copy=False)),
                (gamma, dgamma.astype(gamma.data.dtype, copy=False)),
                (beta, dbeta.astype(beta.data.dtype, copy=False))]

    return _result(y, (x, gamma, beta), "batch_norm", bw)


def leaky_relu(x, slope=0.01):
    """Elementwise x -> x if x >= 0 else slope*x."""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in (0,1), got {slope}")
    pos = x.data >= 0
    y = np.where(pos, x.data, x.data * slope).astype(x.data.dtype, copy=False)

    def bw(gy):
        return [(x, np.where(pos, gy, gy * slope).astype(x.data.dtype, copy=False))]

    return _result(y, (x,), "leaky_relu", bw)


def max_pool2(x):
    """2x2 max pool; backward routes to the first row-major argmax of each block."""
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ConfigError(f"max_pool2 needs even extents, got {H}x{W}")
    y, sel = K.maxpool2_forward(x.data)

    def bw(gy):
        return [(x, K.maxpool2_backward(sel, gy))]

    return _result(y, (x,), "max_pool2", bw)


def upsample2(x):
    """Nearest-neighbor 2x upsample; backward sums each 2x2 block."""
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(gy):
        B, C, H2, W2 = gy.shape
        g = gy.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))
        return [(x, g.astype(x.data.dtype, copy=False))]

    return _result(y, (x,), "upsample2", bw)


def concat_channels(a, b):
    """Concatenate along the channel axis, `a` first."""
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ConfigError(
            f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}"
        )
    ca = a.data.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def bw(gy):
        return [(a, np.ascontiguousarray(gy[:, :ca])),
                (b, np.ascontiguousarray(gy[:, ca:]))]

    return _result(y, (a, b), "concat_channels", bw)


def softmax_channels(scores):
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    s = scores.data
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    p = e / e.sum(axis=1, keepdims=True)
    p = p.astype(s.dtype, copy=False)

    def bw(gy):
        dot = (gy * p).sum(axis=1, keepdims=True)
        return [(scores, (p * (gy - dot)).astype(s.dtype, copy=False))]

    return _result(p, (scores,), "softmax_channels", bw)


def kl_loss(target, probs):
    """Mean per-pixel KL(target || probs); 0*log0 = 0, log input clamped at 1e-12."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target,
                   dtype=probs.data.dtype)
    p = probs.data
    if t.shape != p.shape:
        raise ConfigError(f"kl_loss shape mismatch: target {t.shape} vs probs {p.shape}")
    npix = p.shape[0] * p.shape[2] * p.shape[3]
    pc = np.maximum(p, _LOG_CLAMP)
    tlogt = np.where(t > 0, t * np.log(np.maximum(t, _LOG_CLAMP)), 0.0)
    val = np.asarray((tlogt - t * np.log(pc)).sum() / npix, dtype=p.dtype)

    def bw(gy):
        g = np.where(p >= _LOG_CLAMP, -t / pc, 0.0) * (float(gy) / npix)
        return [(probs, g.astype(p.dtype, copy=False))]

    return _result(val, (probs,), "kl_loss", bw)


def soft_dice_loss(probs, target):
    """Mean over batch and non-background channels of 1 - soft Dice overlap."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target,
                   dtype=probs.data.dtype)
    p = probs.data
    if t.shape != p.shape:
        raise ConfigError(f"soft_dice_loss shape mismatch: {t.shape} vs {p.shape}")
    B, C = p.shape[0], p.shape[1]
    if C < 2:
        raise ConfigError("soft_dice_loss needs at least one non-background channel")
    pf = p[:, 1:]
    tf = t[:, 1:]
    num = 2.0 * (pf * tf).sum(axis=(2, 3)) + _DICE_EPS
    den = (pf * pf).sum(axis=(2, 3)) + (tf * tf).sum(axis=(2, 3)) + _DICE_EPS
    val = np.asarray((1.0 - num / den).mean(), dtype=p.dtype)

    def bw(gy):
        g = np.zeros_like(p)
        coef = float(gy) / (B * (C - 1))
        g[:, 1:] = -coef * (
            2.0 * tf * den[:, :, None, None] - num[:, :, None, None] * 2.0 * pf
        ) / (den * den)[:, :, None, None]
        return [(probs, g.astype(p.dtype, copy=False))]

    return _result(val, (probs,), "soft_dice_loss", bw)


def add(a, b):
    if a.data.shape != b.data.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def bw(gy):
        return [(a, gy), (b, gy)]

    return _result(y, (a, b), "add", bw)


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ConfigError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    y = a.data * b.data

    def bw(gy):
        return [(a, gy * b.data), (b, gy * a.data)]

    return _result(y, (a, b), "mul", bw)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    val = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(gy):
        return [(x, np.full_like(x.data, float(gy)))]

    return _result(val, (x,), "sum", bw)
