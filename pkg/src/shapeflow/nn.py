"""Minimal dense-tensor layer set with hand-written backward passes.

Everything is a plain numpy array. Each `*_fwd` returns (output, cache);
the matching `*_bwd` consumes the upstream gradient plus that cache and
returns gradients for inputs and parameters. Ops run in the dtype of
their inputs: float32 for training, float64 for gradient checking.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_K = 0.7978845608028654  # sqrt(2/pi)


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """N(0, std^2) resampled (then clipped) at 2 std."""
    x = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        bad = np.abs(x) > 2 * std
        if not bad.any():
            break
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(x, -2 * std, 2 * std).astype(dtype)


def _check_shapes(got, want, op):
    if tuple(got) != tuple(want):
        raise ValueError(f"{op}: shape mismatch, got {tuple(got)}, want {tuple(want)}")


# --- linear ---------------------------------------------------------------

def linear_fwd(x, w, b):
    _check_shapes(x.shape[-1:], w.shape[:1], "linear")
    return x @ w + b, (x, w)


def linear_bwd(dy, cache):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# --- layernorm (over the last axis) ----------------------------------------

def layernorm_fwd(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_bwd(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --- GELU (tanh approximation) ----------------------------------------------

def gelu_fwd(x):
    x2 = x * x
    t = np.tanh(_GELU_K * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def gelu_bwd(dy, cache):
    x, x2, t = cache
    dt = _GELU_K * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


# --- softmax ----------------------------------------------------------------

def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_bwd(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


# --- multi-head causal attention ---------------------------------------------

def _split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def validate_causal_mask(mask):
    l = mask.shape[-1]
    if np.any(mask & ~np.tril(np.ones((l, l), dtype=bool))):
        raise ValueError("attention: mask allows attending to a future position")


def additive_mask(mask, dtype):
    """Boolean attend-mask -> additive scores term (disallowed = huge negative,
    which softmax turns into an exact zero weight)."""
    neg = np.finfo(dtype).min / 4
    return np.where(mask[:, None, :, :], dtype.type(0), dtype.type(neg))


def causal_attention_fwd(x, wq, wk, wv, wo, mask, n_heads, mask_add=None,
                         validate=True):
    """x: (B, L, D); mask: (B, L, L) bool, True = may attend.

    The mask must be causal (no attention to the future); block structure
    within the lower triangle is the caller's business. `mask_add` is an
    optional precomputed additive mask (callers reusing one mask across
    blocks validate once and pass validate=False).
    """
    b, l, d = x.shape
    if mask.shape != (b, l, l):
        raise ValueError(f"attention: mask shape {mask.shape} != {(b, l, l)}")
    if validate:
        validate_causal_mask(mask)
    dh = d // n_heads
    q = _split_heads(x @ wq, n_heads)
    k = _split_heads(x @ wk, n_heads)
    v = _split_heads(x @ wv, n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(np.asarray(dh, dtype=x.dtype))
    if mask_add is None:
        mask_add = additive_mask(mask, np.dtype(x.dtype))
    scores += mask_add
    attn = softmax(scores, axis=-1)
    ctx = attn @ v
    merged = _merge_heads(ctx)
    y = merged @ wo
    return y, (x, q, k, v, attn, merged, wq, wk, wv, wo)


def causal_attention_bwd(dy, cache):
    x, q, k, v, attn, merged, wq, wk, wv, wo = cache
    b, l, d = x.shape
    h = q.shape[1]
    dh = d // h
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=x.dtype))

    dwo = merged.reshape(-1, d).T @ dy.reshape(-1, d)
    dctx = _split_heads(dy @ wo.T, h)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_bwd(dattn, attn) * scale  # masked entries: attn==0 -> 0
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dq, dk, dv = (_merge_heads(g) for g in (dq, dk, dv))
    x2 = x.reshape(-1, d)
    dwq, dwk, dwv = (x2.T @ g.reshape(-1, d) for g in (dq, dk, dv))
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv, dwo


# --- 3x3 convolutions (NHWC, pad 1) -----------------------------------------

def _out_hw(h, w, stride):
    return (h - 1) // stride + 1, (w - 1) // stride + 1


def _im2col3(xp, stride, ho, wo):
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, 9, c), dtype=xp.dtype)
    for idx in range(9):
        di, dj = divmod(idx, 3)
        cols[..., idx, :] = xp[:, di:di + stride * (ho - 1) + 1:stride,
                               dj:dj + stride * (wo - 1) + 1:stride, :]
    return cols


def conv3x3_fwd(x, w, b, stride=1):
    """Dense 3x3 conv. x: (B,H,W,Cin), w: (3,3,Cin,Cout)."""
    _check_shapes(x.shape[-1:], w.shape[2:3], "conv3x3")
    bsz, h, ww, cin = x.shape
    cout = w.shape[-1]
    ho, wo = _out_hw(h, ww, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col3(xp, stride, ho, wo).reshape(bsz, ho, wo, 9 * cin)
    y = cols @ w.reshape(9 * cin, cout) + b
    return y, (cols, x.shape, w, stride)


def conv3x3_bwd(dy, cache):
    cols, xshape, w, stride = cache
    bsz, h, ww, cin = xshape
    cout = w.shape[-1]
    ho, wo = dy.shape[1:3]
    dy2 = dy.reshape(-1, cout)
    dw = (cols.reshape(-1, 9 * cin).T @ dy2).reshape(3, 3, cin, cout)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(9 * cin, cout).T).reshape(bsz, ho, wo, 9, cin)
    dxp = np.zeros((bsz, h + 2, ww + 2, cin), dtype=dy.dtype)
    for idx in range(9):
        di, dj = divmod(idx, 3)
        dxp[:, di:di + stride * (ho - 1) + 1:stride,
            dj:dj + stride * (wo - 1) + 1:stride, :] += dcols[..., idx, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def dwconv3x3_fwd(x, w, b):
    """Depthwise 3x3 conv, stride 1. w: (3,3,C)."""
    _check_shapes(x.shape[-1:], w.shape[-1:], "dwconv3x3")
    bsz, h, ww, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    y = np.broadcast_to(b, (bsz, h, ww, c)).copy()
    for idx in range(9):
        di, dj = divmod(idx, 3)
        y += xp[:, di:di + h, dj:dj + ww, :] * w[di, dj]
    return y, (xp, x.shape, w)


def dwconv3x3_bwd(dy, cache):
    xp, xshape, w = cache
    bsz, h, ww, c = xshape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for idx in range(9):
        di, dj = divmod(idx, 3)
        patch = xp[:, di:di + h, dj:dj + ww, :]
        dw[di, dj] = (dy * patch).reshape(-1, c).sum(axis=0)
        dxp[:, di:di + h, dj:dj + ww, :] += dy * w[di, dj]
    db = dy.reshape(-1, c).sum(axis=0)
    return dxp[:, 1:-1, 1:-1, :], dw, db


# --- patchify / pixel shuffle ------------------------------------------------
# Exact inverses. Channel order of a 2x2 patch: (r0c0, r0c1, r1c0, r1c1),
# each slot carrying the full input channel block.

def patchify2x2(x):
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"patchify2x2: dims must be even, got {h}x{w}")
    y = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    y = np.moveaxis(y, (-4, -2), (-3, -2))  # (..., h/2, w/2, 2, 2, c)
    return np.ascontiguousarray(y).reshape(*lead, h // 2, w // 2, 4 * c)


def pixel_shuffle2(x):
    *lead, h, w, c4 = x.shape
    if c4 % 4:
        raise ValueError(f"pixel_shuffle2: channels must divide by 4, got {c4}")
    c = c4 // 4
    y = x.reshape(*lead, h, w, 2, 2, c)
    y = np.moveaxis(y, (-3, -2), (-4, -2))  # (..., h, 2, w, 2, c)
    return np.ascontiguousarray(y).reshape(*lead, 2 * h, 2 * w, c)


# --- ConvNeXt-style block -----------------------------------------------------
# depthwise 3x3 -> channel layernorm -> pointwise MLP (4x, GELU) -> residual.
# Parameter names under `prefix`: dw.w dw.b ln.g ln.b pw1.w pw1.b pw2.w pw2.b

def convnext_init(rng, c, dtype=np.float32):
    p = {
        "dw.w": trunc_normal(rng, (3, 3, c), dtype=dtype),
        "dw.b": np.zeros(c, dtype=dtype),
        "ln.g": np.ones(c, dtype=dtype),
        "ln.b": np.zeros(c, dtype=dtype),
        "pw1.w": trunc_normal(rng, (c, 4 * c), dtype=dtype),
        "pw1.b": np.zeros(4 * c, dtype=dtype),
        # zero init: the block starts as the identity map
        "pw2.w": np.zeros((4 * c, c), dtype=dtype),
        "pw2.b": np.zeros(c, dtype=dtype),
    }
    return p


def convnext_fwd(x, params, prefix):
    g = lambda k: params[prefix + k]
    h0, c_dw = dwconv3x3_fwd(x, g("dw.w"), g("dw.b"))
    h1, c_ln = layernorm_fwd(h0, g("ln.g"), g("ln.b"))
    h2, c_l1 = linear_fwd(h1, g("pw1.w"), g("pw1.b"))
    h3, c_ge = gelu_fwd(h2)
    h4, c_l2 = linear_fwd(h3, g("pw2.w"), g("pw2.b"))
    return x + h4, (c_dw, c_ln, c_l1, c_ge, c_l2)


def convnext_bwd(dy, cache, grads, prefix):
    c_dw, c_ln, c_l1, c_ge, c_l2 = cache
    dh3, dw2, db2 = linear_bwd(dy, c_l2)
    dh2 = gelu_bwd(dh3, c_ge)
    dh1, dw1, db1 = linear_bwd(dh2, c_l1)
    dh0, dg, dbias = layernorm_bwd(dh1, c_ln)
    dx, ddw, ddb = dwconv3x3_bwd(dh0, c_dw)
    grads[prefix + "pw2.w"] += dw2
    grads[prefix + "pw2.b"] += db2
    grads[prefix + "pw1.w"] += dw1
    grads[prefix + "pw1.b"] += db1
    grads[prefix + "ln.g"] += dg
    grads[prefix + "ln.b"] += dbias
    grads[prefix + "dw.w"] += ddw
    grads[prefix + "dw.b"] += ddb
    return dx + dy  # residual path


# --- parameter-tree helpers ----------------------------------------------------

def zeros_like_tree(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def cast_tree(params, dtype):
    return {k: v.astype(dtype) for k, v in params.items()}


def assert_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
