"""Manual forward/backward primitives for the small transformer stack.

Every forward op returns (output, cache); the matching backward consumes the
cache and returns input/parameter gradients. Compute dtype follows the input
(float32 or float64); parameters are cast on the fly.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

LN_EPS = 1e-5


class ForwardTape:
    """Per-pass activation cache; a tape can be replayed backward once."""

    def __init__(self):
        self.caches: dict = {}
        self.consumed = False

    def consume(self):
        if self.consumed:
            raise ContractError("tape already consumed; rerun forward before backward")
        self.consumed = True


# ---------------------------------------------------------------------------
# linear / layernorm / gelu

def linear_fw(x, w, b):
    w = w.astype(x.dtype, copy=False)
    b = b.astype(x.dtype, copy=False)
    return x @ w + b, (x, w)


def linear_bw(g, cache):
    x, w = cache
    gx = g @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0)
    return gx, gw, gb


def layernorm_fw(x, scale, shift):
    scale = scale.astype(x.dtype, copy=False)
    shift = shift.astype(x.dtype, copy=False)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale)


def layernorm_bw(g, cache):
    xhat, inv, scale = cache
    d = xhat.shape[-1]
    gxhat = g * scale
    gscale = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
    gshift = np.sum(g, axis=tuple(range(g.ndim - 1)))
    gx = inv / d * (
        d * gxhat
        - np.sum(gxhat, axis=-1, keepdims=True)
        - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True)
    )
    return gx, gscale, gshift


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_fw(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def gelu_bw(g, cache):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def softmax_fw(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_bw(g, p):
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# attention block (pre-norm callers pass the normalized input)

def attention_fw(x, params, prefix, heads):
    """Multi-head self-attention. x: (B, S, D)."""
    b, s, d = x.shape
    if d % heads != 0:
        raise ShapeError(f"embed dim {d} not divisible by {heads} heads")
    hd = d // heads

    q, cq = linear_fw(x, params[prefix + ".wq"], params[prefix + ".bq"])
    k, ck = linear_fw(x, params[prefix + ".wk"], params[prefix + ".bk"])
    v, cv = linear_fw(x, params[prefix + ".wv"], params[prefix + ".bv"])

    def split(t):
        return t.reshape(b, s, heads, hd).transpose(0, 2, 1, 3)  # (B,H,S,hd)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(hd)
    probs, cp = softmax_fw(scores)
    ctx = probs @ vh                                    # (B,H,S,hd)
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
    out, co = linear_fw(merged, params[prefix + ".wo"], params[prefix + ".bo"])
    cache = (cq, ck, cv, co, qh, kh, vh, cp, heads, hd)
    return out, probs, cache


def attention_bw(g, cache, prefix):
    cq, ck, cv, co, qh, kh, vh, probs, heads, hd = cache
    b, h, s, _ = qh.shape
    d = h * hd

    g_merged, gwo, gbo = linear_bw(g, co)
    g_ctx = g_merged.reshape(b, s, heads, hd).transpose(0, 2, 1, 3)
    g_probs = g_ctx @ vh.transpose(0, 1, 3, 2)
    g_vh = probs.transpose(0, 1, 3, 2) @ g_ctx
    g_scores = softmax_bw(g_probs, probs) / np.sqrt(hd)
    g_qh = g_scores @ kh
    g_kh = g_scores.transpose(0, 1, 3, 2) @ qh

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(b, s, d)

    gq_x, gwq, gbq = linear_bw(merge(g_qh), cq)
    gk_x, gwk, gbk = linear_bw(merge(g_kh), ck)
    gv_x, gwv, gbv = linear_bw(merge(g_vh), cv)
    gx = gq_x + gk_x + gv_x
    grads = {
        prefix + ".wq": gwq, prefix + ".bq": gbq,
        prefix + ".wk": gwk, prefix + ".bk": gbk,
        prefix + ".wv": gwv, prefix + ".bv": gbv,
        prefix + ".wo": gwo, prefix + ".bo": gbo,
    }
    return gx, grads


# ---------------------------------------------------------------------------
# non-overlapping patch convolution (kernel size == stride == k)

def patch_fw_1d(x, k):
    """(B, C, L) -> (B, L//k, C*k) patches; trailing remainder is dropped."""
    b, c, length = x.shape
    if length < 1:
        raise ContractError("empty spatial extent")
    s = length // k
    if s < 1:
        raise ShapeError(f"input length {length} shorter than kernel {k}")
    xt = x[:, :, : s * k].reshape(b, c, s, k)
    return xt.transpose(0, 2, 1, 3).reshape(b, s, c * k)


def patch_bw_1d(g, x_shape, k):
    b, c, length = x_shape
    s = length // k
    gx = np.zeros(x_shape, dtype=g.dtype)
    gp = g.reshape(b, s, c, k).transpose(0, 2, 1, 3)
    gx[:, :, : s * k] = gp.reshape(b, c, s * k)
    return gx


def patch_fw_2d(x, k):
    """(B, C, H, W) -> (B, (H//k)*(W//k), C*k*k)."""
    b, c, h, w = x.shape
    hs, ws = h // k, w // k
    if hs < 1 or ws < 1:
        raise ShapeError(f"input {h}x{w} smaller than kernel {k}")
    xt = x[:, :, : hs * k, : ws * k].reshape(b, c, hs, k, ws, k)
    return xt.transpose(0, 2, 4, 1, 3, 5).reshape(b, hs * ws, c * k * k)


def patch_bw_2d(g, x_shape, k):
    b, c, h, w = x_shape
    hs, ws = h // k, w // k
    gx = np.zeros(x_shape, dtype=g.dtype)
    gp = g.reshape(b, hs, ws, c, k, k).transpose(0, 3, 1, 4, 2, 5)
    gx[:, :, : hs * k, : ws * k] = gp.reshape(b, c, hs * k, ws * k)
    return gx


# ---------------------------------------------------------------------------
# pixel shuffle (sub-pixel rearrangement)

def pixel_shuffle(x, r):
    """(B, r^nd * K, *spatial) -> (B, K, *(r * spatial)); nd inferred."""
    if r == 1:
        return x
    if x.ndim == 3:  # 1D
        b, c, length = x.shape
        if c % r != 0:
            raise ShapeError(f"channels {c} not divisible by {r}")
        k = c // r
        return x.reshape(b, k, r, length).transpose(0, 1, 3, 2).reshape(b, k, length * r)
    if x.ndim == 4:  # 2D
        b, c, h, w = x.shape
        if c % (r * r) != 0:
            raise ShapeError(f"channels {c} not divisible by {r * r}")
        k = c // (r * r)
        return (
            x.reshape(b, k, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, k, h * r, w * r)
        )
    raise ShapeError(f"pixel_shuffle expects rank 3 or 4, got {x.ndim}")


def pixel_unshuffle(x, r):
    if r == 1:
        return x
    if x.ndim == 3:
        b, k, length = x.shape
        if length % r != 0:
            raise ShapeError(f"length {length} not divisible by {r}")
        return x.reshape(b, k, length // r, r).transpose(0, 1, 3, 2).reshape(b, k * r, length // r)
    if x.ndim == 4:
        b, k, h, w = x.shape
        if h % r != 0 or w % r != 0:
            raise ShapeError(f"spatial {h}x{w} not divisible by {r}")
        return (
            x.reshape(b, k, h // r, r, w // r, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, k * r * r, h // r, w // r)
        )
    raise ShapeError(f"pixel_unshuffle expects rank 3 or 4, got {x.ndim}")


# ---------------------------------------------------------------------------
# positional-table interpolation (variable-length k=1 embedders)

def interp_positional(table, length):
    """Linearly resample an (S, D) table to `length` rows; identity at S."""
    s = table.shape[0]
    if length == s:
        return table, None
    if length == 1:
        w = np.zeros((1, 2))
        idx = np.zeros((1, 2), dtype=np.int64)
        w[0, 0] = 1.0
        return table[:1].copy(), (idx, w, s)
    u = np.arange(length) * (s - 1) / (length - 1)
    lo = np.floor(u).astype(np.int64)
    lo = np.minimum(lo, s - 2)
    frac = u - lo
    out = (1.0 - frac)[:, None] * table[lo] + frac[:, None] * table[lo + 1]
    idx = np.stack([lo, lo + 1], axis=1)
    w = np.stack([1.0 - frac, frac], axis=1)
    return out, (idx, w, s)


def interp_positional_bw(g2, cache):
    """Scatter (S', D) row gradients back to the (S, D) table."""
    idx, w, s = cache
    d = g2.shape[-1]
    gt = np.zeros((s, d), dtype=g2.dtype)
    np.add.at(gt, idx[:, 0], w[:, 0][:, None] * g2)
    np.add.at(gt, idx[:, 1], w[:, 1][:, None] * g2)
    return gt
