"""Numpy layer primitives with explicit backward passes.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache and returns input (and parameter)
gradients. Arrays carry a leading token axis and a trailing feature axis.
"""

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w):
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def layernorm_forward(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_backward(dy, cache):
    xhat, rstd, g = cache
    d = dy.reshape(-1, dy.shape[-1])
    xh = xhat.reshape(-1, xhat.shape[-1])
    dg = (d * xh).sum(axis=0)
    db = d.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(x, w_qkv, b_qkv, w_out, b_out, heads):
    """Multi-head self-attention over all rows of ``x`` (T, D)."""
    t, d = x.shape
    dh = d // heads
    qkv = x @ w_qkv + b_qkv
    qkv = qkv.reshape(t, 3, heads, dh).transpose(1, 2, 0, 3)  # (3, heads, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = float(1.0 / np.sqrt(dh))
    attn = softmax((q @ k.transpose(0, 2, 1)) * scale)
    o = (attn @ v).transpose(1, 0, 2).reshape(t, d)
    out = o @ w_out + b_out
    return out, (x, q, k, v, attn, o, scale)


def attention_backward(dout, cache, w_qkv, w_out, heads):
    x, q, k, v, attn, o, scale = cache
    t, d = x.shape
    dh = d // heads
    dw_out = o.T @ dout
    db_out = dout.sum(axis=0)
    do = (dout @ w_out.T).reshape(t, heads, dh).transpose(1, 0, 2)
    dattn = do @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ do
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(2, 0, 1, 3).reshape(t, 3 * d)
    dw_qkv = x.T @ dqkv
    db_qkv = dqkv.sum(axis=0)
    dx = dqkv @ w_qkv.T
    return dx, dw_qkv, db_qkv, dw_out, db_out


def mlp_forward(x, w1, b1, w2, b2):
    h, c1 = linear_forward(x, w1, b1)
    a, cg = gelu_forward(h)
    y, c2 = linear_forward(a, w2, b2)
    return y, (c1, cg, c2)


def mlp_backward(dy, cache, w1, w2):
    c1, cg, c2 = cache
    da, dw2, db2 = linear_backward(dy, c2, w2)
    dh = gelu_backward(da, cg)
    dx, dw1, db1 = linear_backward(dh, c1, w1)
    return dx, dw1, db1, dw2, db2
