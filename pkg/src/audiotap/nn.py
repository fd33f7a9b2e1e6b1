"""Minimal numpy neural-net primitives with explicit backward passes.

Everything here operates on plain ``numpy`` arrays and supports arbitrary
leading batch dimensions; the sequence axis is always ``-2`` and the feature
axis ``-1``. Each ``*_fwd`` function returns ``(output, cache)`` and the
matching ``*_bwd`` consumes the upstream gradient plus the cache and returns
gradients for its inputs and parameters. Gradients are exact (verified by
central finite differences in the test suite), which keeps head training
free of any autograd dependency.

Parameters are stored in flat ``dict[str, np.ndarray]`` maps. A transformer
block uses the following keys (relative to its prefix)::

    ln1.gamma, ln1.beta,
    attn.wq, attn.bq, attn.wk, attn.bk, attn.wv, attn.bv, attn.wo, attn.bo,
    ln2.gamma, ln2.beta,
    ffn.w1, ffn.b1, ffn.w2, ffn.b2
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-5

# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """``y = x @ w + b`` with ``x`` of shape ``[..., d_in]``."""
    return x @ w + b, (x, w)


def linear_bwd(dy: np.ndarray, cache):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# LayerNorm (over the last axis)
# ---------------------------------------------------------------------------


def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layernorm_bwd(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    dxhat = dy * gamma
    dgamma = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# GELU (exact erf form)
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_fwd(x: np.ndarray):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_bwd(dy: np.ndarray, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# Softmax (over the last axis)
# ---------------------------------------------------------------------------


def softmax_fwd(x: np.ndarray):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_bwd(dy: np.ndarray, y: np.ndarray):
    return (dy - (dy * y).sum(axis=-1, keepdims=True)) * y


# ---------------------------------------------------------------------------
# Self-attention
# ---------------------------------------------------------------------------


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """[..., m, d] -> [..., heads, m, d // heads]"""
    *lead, m, d = x.shape
    x = x.reshape(*lead, m, heads, d // heads)
    return np.moveaxis(x, -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """[..., heads, m, dh] -> [..., m, heads * dh]"""
    x = np.moveaxis(x, -3, -2)
    *lead, m, h, dh = x.shape
    return x.reshape(*lead, m, h * dh)


def attention_fwd(x: np.ndarray, p: dict, prefix: str, heads: int):
    """Self-attention over axis -2. ``x`` has shape ``[..., m, d]``."""
    wq, bq = p[prefix + "attn.wq"], p[prefix + "attn.bq"]
    wk, bk = p[prefix + "attn.wk"], p[prefix + "attn.bk"]
    wv, bv = p[prefix + "attn.wv"], p[prefix + "attn.bv"]
    wo, bo = p[prefix + "attn.wo"], p[prefix + "attn.bo"]

    q, cq = linear_fwd(x, wq, bq)
    k, ck = linear_fwd(x, wk, bk)
    v, cv = linear_fwd(x, wv, bv)

    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
    attn, _ = softmax_fwd(scores)
    ctx = attn @ vh
    merged = _merge_heads(ctx)
    y, co = linear_fwd(merged, wo, bo)
    cache = (cq, ck, cv, co, qh, kh, vh, attn, scale, heads)
    return y, cache


def attention_bwd(dy: np.ndarray, cache, prefix: str):
    cq, ck, cv, co, qh, kh, vh, attn, scale, heads = cache
    dmerged, dwo, dbo = linear_bwd(dy, co)
    dctx = _split_heads(dmerged, heads)

    dattn = dctx @ np.swapaxes(vh, -1, -2)
    dvh = np.swapaxes(attn, -1, -2) @ dctx
    dscores = softmax_bwd(dattn, attn) * scale
    dqh = dscores @ kh
    dkh = np.swapaxes(dscores, -1, -2) @ qh

    dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
    dxq, dwq, dbq = linear_bwd(dq, cq)
    dxk, dwk, dbk = linear_bwd(dk, ck)
    dxv, dwv, dbv = linear_bwd(dv, cv)
    dx = dxq + dxk + dxv
    grads = {
        prefix + "attn.wq": dwq, prefix + "attn.bq": dbq,
        prefix + "attn.wk": dwk, prefix + "attn.bk": dbk,
        prefix + "attn.wv": dwv, prefix + "attn.bv": dbv,
        prefix + "attn.wo": dwo, prefix + "attn.bo": dbo,
    }
    return dx, grads


# ---------------------------------------------------------------------------
# Pre-norm transformer block
# ---------------------------------------------------------------------------


def block_fwd(x: np.ndarray, p: dict, prefix: str, heads: int):
    """Pre-norm block: ``x + attn(ln1(x))`` then ``(+) ffn(ln2(.))``."""
    h1, c_ln1 = layernorm_fwd(x, p[prefix + "ln1.gamma"], p[prefix + "ln1.beta"])
    a, c_attn = attention_fwd(h1, p, prefix, heads)
    x1 = x + a
    h2, c_ln2 = layernorm_fwd(x1, p[prefix + "ln2.gamma"], p[prefix + "ln2.beta"])
    f1, c_f1 = linear_fwd(h2, p[prefix + "ffn.w1"], p[prefix + "ffn.b1"])
    g, c_g = gelu_fwd(f1)
    f2, c_f2 = linear_fwd(g, p[prefix + "ffn.w2"], p[prefix + "ffn.b2"])
    y = x1 + f2
    return y, (c_ln1, c_attn, c_ln2, c_f1, c_g, c_f2)


def block_bwd(dy: np.ndarray, cache, prefix: str):
    c_ln1, c_attn, c_ln2, c_f1, c_g, c_f2 = cache
    grads = {}

    dg, dw2, db2 = linear_bwd(dy, c_f2)
    df1 = gelu_bwd(dg, c_g)
    dh2, dw1, db1 = linear_bwd(df1, c_f1)
    dx1_ln, dg2, db_ln2 = layernorm_bwd(dh2, c_ln2)
    dx1 = dy + dx1_ln

    da = dx1
    dh1, attn_grads = attention_bwd(da, c_attn, prefix)
    dx_ln, dg1, db_ln1 = layernorm_bwd(dh1, c_ln1)
    dx = dx1 + dx_ln

    grads.update(attn_grads)
    grads[prefix + "ln1.gamma"] = dg1
    grads[prefix + "ln1.beta"] = db_ln1
    grads[prefix + "ln2.gamma"] = dg2
    grads[prefix + "ln2.beta"] = db_ln2
    grads[prefix + "ffn.w1"] = dw1
    grads[prefix + "ffn.b1"] = db1
    grads[prefix + "ffn.w2"] = dw2
    grads[prefix + "ffn.b2"] = db2
    return dx, grads


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def scaled_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_block(rng: np.random.Generator, dim: int, ffn_mult: int, prefix: str) -> dict:
    """Fresh parameters for one pre-norm transformer block of width ``dim``."""
    hidden = ffn_mult * dim
    p = {
        prefix + "ln1.gamma": np.ones(dim),
        prefix + "ln1.beta": np.zeros(dim),
    }
    for wname, bname in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
        p[prefix + f"attn.{wname}"] = scaled_uniform(rng, (dim, dim), dim)
        p[prefix + f"attn.{bname}"] = np.zeros(dim)
    p[prefix + "ln2.gamma"] = np.ones(dim)
    p[prefix + "ln2.beta"] = np.zeros(dim)
    p[prefix + "ffn.w1"] = scaled_uniform(rng, (dim, hidden), dim)
    p[prefix + "ffn.b1"] = np.zeros(hidden)
    p[prefix + "ffn.w2"] = scaled_uniform(rng, (hidden, dim), hidden)
    p[prefix + "ffn.b2"] = np.zeros(dim)
    return p
