"""Minimal numpy neural-net kernel: transformer block forward/backward and Adam.

Everything operates on float64 activation arrays of shape (n, T, D) and on
parameter dicts of plain ndarrays, so training is deterministic for a fixed
seed and gradients can be validated against finite differences. Only a single
block ever needs a backward pass (per-block student training); the full model
forward lives in `backbone`.

Block layout is the standard pre-norm transformer block:

    r = x + Attn(LN1(x))
    y = r + MLP(LN2(r))

with multi-head softmax attention and a GELU MLP of width mlp_ratio * D.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

Params = dict[str, np.ndarray]

LN_EPS = 1e-6
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# elementwise pieces

def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# layer norm (last axis), with a parameter-free variant for tap standardization

def _ln_core_forward(x, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _ln_core_backward(dxhat, xhat, inv):
    d = xhat.shape[-1]
    s1 = dxhat.sum(axis=-1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
    return (inv / d) * (d * dxhat - s1 - xhat * s2)


def layer_norm_forward(x, g, b):
    xhat, inv = _ln_core_forward(x)
    return g * xhat + b, (xhat, inv, g)


def layer_norm_backward(dout, cache):
    xhat, inv, g = cache
    d = dout.shape[-1]
    dg = np.einsum("nd,nd->d", dout.reshape(-1, d), xhat.reshape(-1, d))
    db = dout.reshape(-1, d).sum(axis=0)
    dx = _ln_core_backward(dout * g, xhat, inv)
    return dx, dg, db


def standardize_forward(x):
    xhat, inv = _ln_core_forward(x)
    return xhat, (xhat, inv)


def standardize_backward(dout, cache):
    xhat, inv = cache
    return _ln_core_backward(dout, xhat, inv)


# ---------------------------------------------------------------------------
# multi-head attention

def _split_heads(x, num_heads):
    n, t, d = x.shape
    return x.reshape(n, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    n, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, t, h * dh)


def mha_forward(a, p, num_heads):
    """Attention over already-normalized input `a` (n, T, D)."""
    q = _split_heads(a @ p["wq"] + p["bq"], num_heads)
    k = _split_heads(a @ p["wk"] + p["bk"], num_heads)
    v = _split_heads(a @ p["wv"] + p["bv"], num_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    att = softmax((q @ k.swapaxes(-1, -2)) * scale)
    ctx = _merge_heads(att @ v)
    out = ctx @ p["wo"] + p["bo"]
    return out, (a, q, k, v, att, ctx, scale)


def mha_backward(dout, cache, p):
    a, q, k, v, att, ctx, scale = cache
    num_heads = q.shape[1]
    grads = {}

    grads["wo"] = np.einsum("ntd,nte->de", ctx, dout)
    grads["bo"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    dctx = _split_heads(dout @ p["wo"].T, num_heads)

    datt = dctx @ v.swapaxes(-1, -2)
    dv = att.swapaxes(-1, -2) @ dctx
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.swapaxes(-1, -2) @ q) * scale

    da = np.zeros_like(a)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dm = _merge_heads(dproj)
        grads["w" + name] = np.einsum("ntd,nte->de", a, dm)
        grads["b" + name] = dm.reshape(-1, dm.shape[-1]).sum(axis=0)
        da += dm @ p["w" + name].T
    return da, grads


# ---------------------------------------------------------------------------
# transformer block

BLOCK_PARAM_NAMES = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
)


def init_block_params(rng, dim, num_heads, mlp_ratio=4.0, std=0.02):
    if dim % num_heads != 0:
        raise ValueError(f"embed dim {dim} not divisible by {num_heads} heads")
    hidden = int(round(dim * mlp_ratio))
    w = lambda *shape: rng.normal(0.0, std, size=shape)
    return {
        "ln1_g": np.ones(dim), "ln1_b": np.zeros(dim),
        "wq": w(dim, dim), "bq": np.zeros(dim),
        "wk": w(dim, dim), "bk": np.zeros(dim),
        "wv": w(dim, dim), "bv": np.zeros(dim),
        "wo": w(dim, dim), "bo": np.zeros(dim),
        "ln2_g": np.ones(dim), "ln2_b": np.zeros(dim),
        "w1": w(dim, hidden), "b1": np.zeros(hidden),
        "w2": w(hidden, dim), "b2": np.zeros(dim),
    }


def block_forward(x, p, num_heads, dropout_rate=0.0, rng=None):
    """Run one block. Dropout (train-time only) sits on the attention output
    projection and the MLP output, inverted-scaled so eval needs no rescale."""
    if dropout_rate > 0.0 and rng is None:
        raise ValueError("dropout requires an rng")

    a, ln1_cache = layer_norm_forward(x, p["ln1_g"], p["ln1_b"])
    attn, attn_cache = mha_forward(a, p, num_heads)
    mask_attn = None
    if dropout_rate > 0.0:
        mask_attn = (rng.random(attn.shape) >= dropout_rate) / (1.0 - dropout_rate)
        attn = attn * mask_attn
    r = x + attn

    m, ln2_cache = layer_norm_forward(r, p["ln2_g"], p["ln2_b"])
    h_pre = m @ p["w1"] + p["b1"]
    h = gelu(h_pre)
    u = h @ p["w2"] + p["b2"]
    mask_mlp = None
    if dropout_rate > 0.0:
        mask_mlp = (rng.random(u.shape) >= dropout_rate) / (1.0 - dropout_rate)
        u = u * mask_mlp
    y = r + u

    cache = (ln1_cache, attn_cache, mask_attn, ln2_cache, m, h_pre, h, mask_mlp)
    return y, cache


def block_backward(dout, cache, p):
    """Gradient of a scalar loss w.r.t. block input and params.

    Returns (dx, grads) with grads keyed like the param dict.
    """
    ln1_cache, attn_cache, mask_attn, ln2_cache, m, h_pre, h, mask_mlp = cache
    grads = {}

    du = dout if mask_mlp is None else dout * mask_mlp
    dr = dout.copy()

    grads["w2"] = np.einsum("nth,ntd->hd", h, du)
    grads["b2"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
    dh_pre = (du @ p["w2"].T) * gelu_grad(h_pre)
    grads["w1"] = np.einsum("ntd,nth->dh", m, dh_pre)
    grads["b1"] = dh_pre.reshape(-1, dh_pre.shape[-1]).sum(axis=0)
    dm = dh_pre @ p["w1"].T

    dr2, grads["ln2_g"], grads["ln2_b"] = layer_norm_backward(dm, ln2_cache)
    dr += dr2

    dattn = dr if mask_attn is None else dr * mask_attn
    dx = dr.copy()
    da, attn_grads = mha_backward(dattn, attn_cache, p)
    grads.update(attn_grads)

    dx1, grads["ln1_g"], grads["ln1_b"] = layer_norm_backward(da, ln1_cache)
    dx += dx1
    return dx, grads


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adaptive-moment optimizer over a param dict; updates in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            self.params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def copy_params(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}
