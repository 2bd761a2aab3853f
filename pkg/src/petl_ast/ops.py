"""Differentiable primitives.

All ops take and return :class:`~petl_ast.tensor.Tensor`. Each one saves only
what its gradient needs. Broadcasting is supported where the model uses it
(bias adds, batched matmul, expanding CLS/prompt rows across the batch).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .tensor import DTYPE, Tensor, make_result

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result("scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # weight shared across the batch: fold leading axes into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------------ reshaping

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return make_result("expand", out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only; fancy indices would need scatter-add."""
    src = a.shape

    def bw(g):
        z = np.zeros(src, dtype=DTYPE)
        z[idx] = g
        return (z,)

    return make_result("index", np.array(a.data[idx], dtype=DTYPE), (a,), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return make_result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return make_result("swish", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = ndtr(xd)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return make_result("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", y, (x,), bw)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half times sigmoid(second half)."""
    c = x.shape[-1]
    if c % 2:
        raise ValueError(f"glu needs an even channel count, got {c}")
    h = c // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = expit(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return make_result("glu", a * s, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` is an integer array of shape (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_result("cross_entropy", np.asarray(loss), (logits,), bw)


# ------------------------------------------------------------- normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean / unit variance, then affine."""
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs d >= 1")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


@dataclass
class BNState:
    """Affine parameters and running statistics of a 1-D batch norm."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=DTYPE)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm_1d(x: Tensor, state: BNState, training: bool) -> Tensor:
    """Per-channel (last axis) batch norm over every leading axis.

    Training mode normalizes with the batch's biased variance and updates the
    running stats with the unbiased one; eval mode uses the running stats.
    """
    c = x.shape[-1]
    if c != state.channels:
        raise ValueError(f"batch_norm_1d: {c} channels but state has {state.channels}")
    lead = tuple(range(x.ndim - 1))
    gd = state.gamma.data
    if training:
        m = int(np.prod([x.shape[i] for i in lead]))
        mu = x.data.mean(axis=lead)
        xc = x.data - mu
        var = (xc * xc).mean(axis=lead)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        unbiased = var * m / (m - 1) if m > 1 else var
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mu
        state.running_var = (1.0 - mom) * state.running_var + mom * unbiased

        def bw(g):
            dxhat = g * gd
            dx = inv * (
                dxhat
                - dxhat.mean(axis=lead)
                - xhat * (dxhat * xhat).mean(axis=lead)
            )
            return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result("batch_norm_1d", xhat * gd + state.beta.data, (x, state.gamma, state.beta), bw)


# --------------------------------------------------------------- convolution

def same_padding(k: int) -> tuple[int, int]:
    return (k - 1) // 2, k // 2


def depthwise_conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution along axis -2 with "same" zero padding.

    ``x`` is (..., N, c), ``w`` is (c, k). Left pad is floor((k-1)/2), right
    pad ceil((k-1)/2), so even kernels lean one tap to the right.
    """
    c, k = w.shape
    if k <= 0:
        raise ValueError(f"depthwise_conv1d: kernel size must be >= 1, got {k}")
    if x.shape[-1] != c:
        raise ValueError(f"depthwise_conv1d: input has {x.shape[-1]} channels, weight {c}")
    n = x.shape[-2]
    lp, rp = same_padding(k)
    pad = [(0, 0)] * (x.ndim - 2) + [(lp, rp), (0, 0)]
    xp = np.pad(x.data, pad)
    wd = w.data
    out = np.zeros(x.shape, dtype=DTYPE)
    for j in range(k):
        out += xp[..., j:j + n, :] * wd[:, j]
    out += bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wd)
        for j in range(k):
            dxp[..., j:j + n, :] += g * wd[:, j]
            dw[:, j] = (g * xp[..., j:j + n, :]).sum(axis=lead)
        return dxp[..., lp:lp + n, :], dw, g.sum(axis=lead)

    return make_result("depthwise_conv1d", out, (x, w, bias), bw)
