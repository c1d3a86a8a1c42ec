"""Forward/backward primitives for a small pre-norm transformer.

Activations are batched as ``(B, n, d)``. Each ``*_fwd`` returns
``(out, cache)``; the matching ``*_bwd`` takes the upstream gradient and the
cache, adds parameter gradients into ``grads`` (a :class:`GapParams` of
zeros) and returns the input gradient.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def _rows(x):
    return x.reshape(-1, x.shape[-1])


def linear_fwd(x, p, name):
    return x @ p[name + "w"] + p[name + "b"]


def linear_bwd(dy, x, p, grads, name):
    grads[name + "w"] += _rows(x).T @ _rows(dy)
    grads[name + "b"] += _rows(dy).sum(axis=0)
    return dy @ p[name + "w"].T


def layernorm_fwd(x, g, b=None):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    y = xhat * g
    if b is not None:
        y = y + b
    return y, (xhat, rstd)


def layernorm_bwd(dy, cache, g, dg, db=None):
    xhat, rstd = cache
    dg += _rows(dy * xhat).sum(axis=0)
    if db is not None:
        db += _rows(dy).sum(axis=0)
    dxhat = dy * g
    D = xhat.shape[-1]
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                   - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / D)


def gelu_fwd(x):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_bwd(dy, cache):
    x, th = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def _heads(x, heads):
    B, n, d = x.shape
    return x.reshape(B, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, H * dh)


def mha_fwd(xq, xkv, p, name, heads, key_mask=None, buckets=None):
    """Multi-head attention of ``xq`` over ``xkv``.

    ``key_mask`` is a ``(B, nk)`` bool array marking real (unpadded) keys.
    With ``buckets`` (a ``(B, nq, nk)`` int array), a learned per-head
    scalar ``p[name + 'dist'][h, bucket]`` is added to the attention logits.
    """
    scale = 1.0 / np.sqrt(xq.shape[-1] // heads)
    qh = _heads(linear_fwd(xq, p, name + "q"), heads)
    kh = _heads(xkv @ p[name + "kw"], heads)
    vh = _heads(linear_fwd(xkv, p, name + "v"), heads)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if buckets is not None:
        s += p[name + "dist"][:, buckets].transpose(1, 0, 2, 3)
    if key_mask is not None:
        s = np.where(key_mask[:, None, None, :], s, -np.inf)
    a = softmax(s)
    o = _merge(a @ vh)
    out = linear_fwd(o, p, name + "o")
    return out, (xq, xkv, qh, kh, vh, a, o, buckets, heads, scale)


def mha_bwd(dout, cache, p, grads, name, self_attention=False):
    xq, xkv, qh, kh, vh, a, o, buckets, heads, scale = cache
    do = linear_bwd(dout, o, p, grads, name + "o")
    doh = _heads(do, heads)
    da = doh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ doh
    ds = softmax_bwd(da, a)
    if buckets is not None:
        g = grads[name + "dist"]
        nb = g.shape[1]
        flat_b = buckets.ravel()
        for h in range(heads):
            g[h] += np.bincount(flat_b, weights=ds[:, h].ravel(), minlength=nb)
    ds *= scale
    dq = _merge(ds @ kh)
    dk = _merge(ds.transpose(0, 1, 3, 2) @ qh)
    dv = _merge(dvh)
    dxq = linear_bwd(dq, xq, p, grads, name + "q")
    grads[name + "kw"] += _rows(xkv).T @ _rows(dk)
    dxkv = dk @ p[name + "kw"].T + linear_bwd(dv, xkv, p, grads, name + "v")
    if self_attention:
        return dxq + dxkv
    return dxq, dxkv


def ffn_fwd(x, p, name):
    h = x @ p[name + "w1"] + p[name + "b1"]
    g, gc = gelu_fwd(h)
    y = g @ p[name + "w2"] + p[name + "b2"]
    return y, (x, gc, g)


def ffn_bwd(dy, cache, p, grads, name):
    x, gc, g = cache
    grads[name + "w2"] += _rows(g).T @ _rows(dy)
    grads[name + "b2"] += _rows(dy).sum(axis=0)
    dh = gelu_bwd(dy @ p[name + "w2"].T, gc)
    grads[name + "w1"] += _rows(x).T @ _rows(dh)
    grads[name + "b1"] += _rows(dh).sum(axis=0)
    return dh @ p[name + "w1"].T
