"""Vision encoders/decoder, time embedding and alignment head.

Two decoupled image paths feed the transformer:
  * understanding encoder: stride-2 conv stem -> 2 ConvNeXt blocks -> LN,
    producing an 8x8 semantic feature map per 16x16 image;
  * generation encoder/decoder: 2x2 patchify -> ConvNeXt trunk -> linear
    into the sequence, and the mirrored decoder (with a long skip off the
    trunk output) mapping hidden rows back to a 16x16x3 velocity.

All functions are batched over the leading axis and return caches for the
hand-written backward passes.
"""

from __future__ import annotations

import numpy as np

from . import nn


def init_encoder_params(rng, cfg, dtype=np.float32):
    """All non-transformer tensors, in a fixed creation order."""
    p = {}
    d, d_enc = cfg.d_emb, cfg.d_enc
    c_skip, c_dec = cfg.c_skip, cfg.c_dec

    p["time.w1"] = nn.trunc_normal(rng, (d, d), dtype=dtype)
    p["time.b1"] = np.zeros(d, dtype=dtype)
    p["time.w2"] = nn.trunc_normal(rng, (d, d), dtype=dtype)
    p["time.b2"] = np.zeros(d, dtype=dtype)

    if not cfg.shared_encoders:
        p["und_enc.stem.w"] = nn.trunc_normal(rng, (3, 3, 3, d_enc), dtype=dtype)
        p["und_enc.stem.b"] = np.zeros(d_enc, dtype=dtype)
        for j in (0, 1):
            for k, v in nn.convnext_init(rng, d_enc, dtype=dtype).items():
                p[f"und_enc.cnb{j}.{k}"] = v
        p["und_enc.ln.g"] = np.ones(d_enc, dtype=dtype)
        p["und_enc.ln.b"] = np.zeros(d_enc, dtype=dtype)

    p["und_proj.w"] = nn.trunc_normal(rng, (cfg.d_und_feat, d), dtype=dtype)
    p["und_proj.b"] = np.zeros(d, dtype=dtype)

    for j in (0, 1):
        for k, v in nn.convnext_init(rng, c_skip, dtype=dtype).items():
            p[f"gen_enc.cnb{j}.{k}"] = v
    p["gen_enc.out.w"] = nn.trunc_normal(rng, (c_skip, d), dtype=dtype)
    p["gen_enc.out.b"] = np.zeros(d, dtype=dtype)

    c_trunk = c_dec + c_skip
    p["gen_dec.inp.w"] = nn.trunc_normal(rng, (d, c_dec), dtype=dtype)
    p["gen_dec.inp.b"] = np.zeros(c_dec, dtype=dtype)
    for j in (0, 1):
        for k, v in nn.convnext_init(rng, c_trunk, dtype=dtype).items():
            p[f"gen_dec.cnb{j}.{k}"] = v
    p["gen_dec.out.w"] = nn.trunc_normal(rng, (c_trunk // 4, cfg.d_latent), dtype=dtype)
    p["gen_dec.out.b"] = np.zeros(cfg.d_latent, dtype=dtype)

    p["align.w1"] = nn.trunc_normal(rng, (d, d), dtype=dtype)
    p["align.b1"] = np.zeros(d, dtype=dtype)
    p["align.w2"] = nn.trunc_normal(rng, (d, d), dtype=dtype)
    p["align.b2"] = np.zeros(d, dtype=dtype)
    p["align.w3"] = nn.trunc_normal(rng, (d, cfg.d_und_feat), dtype=dtype)
    p["align.b3"] = np.zeros(cfg.d_und_feat, dtype=dtype)
    return p


# --- understanding encoder ----------------------------------------------------

def und_encode_fwd(imgs, params, cfg):
    """(n,16,16,3) images -> (n,8,8,d_und_feat) features.

    In shared-encoder mode the generation trunk is reused instead of the
    dedicated encoder (the configuration the ablation harness compares).
    """
    if imgs.shape[1:] != (cfg.img_side, cfg.img_side, 3):
        raise ValueError(f"und_encode: bad image shape {imgs.shape}")
    if cfg.shared_encoders:
        h = nn.patchify2x2(imgs)
        h, c0 = nn.convnext_fwd(h, params, "gen_enc.cnb0.")
        h, c1 = nn.convnext_fwd(h, params, "gen_enc.cnb1.")
        return h, ("shared", c0, c1)
    h, c_stem = nn.conv3x3_fwd(imgs, params["und_enc.stem.w"],
                               params["und_enc.stem.b"], stride=2)
    h, c0 = nn.convnext_fwd(h, params, "und_enc.cnb0.")
    h, c1 = nn.convnext_fwd(h, params, "und_enc.cnb1.")
    feats, c_ln = nn.layernorm_fwd(h, params["und_enc.ln.g"], params["und_enc.ln.b"])
    return feats, ("own", c_stem, c0, c1, c_ln)


def und_encode_bwd(dfeats, cache, grads):
    if cache[0] == "shared":
        _, c0, c1 = cache
        dh = nn.convnext_bwd(dfeats, c1, grads, "gen_enc.cnb1.")
        dh = nn.convnext_bwd(dh, c0, grads, "gen_enc.cnb0.")
        return  # image gradient not needed
    _, c_stem, c0, c1, c_ln = cache
    dh, dg, db = nn.layernorm_bwd(dfeats, c_ln)
    grads["und_enc.ln.g"] += dg
    grads["und_enc.ln.b"] += db
    dh = nn.convnext_bwd(dh, c1, grads, "und_enc.cnb1.")
    dh = nn.convnext_bwd(dh, c0, grads, "und_enc.cnb0.")
    _, dw, db = nn.conv3x3_bwd(dh, c_stem)
    grads["und_enc.stem.w"] += dw
    grads["und_enc.stem.b"] += db


# --- generation encoder --------------------------------------------------------

def gen_encode_fwd(lats, params, cfg):
    """Latent grids (n,16,16,3) -> sequence rows (n,64,d_emb) + skip maps."""
    if lats.shape[1:] != (cfg.img_side, cfg.img_side, cfg.d_latent):
        raise ValueError(f"gen_encode: bad latent shape {lats.shape}")
    h = nn.patchify2x2(lats)
    h, c0 = nn.convnext_fwd(h, params, "gen_enc.cnb0.")
    skip, c1 = nn.convnext_fwd(h, params, "gen_enc.cnb1.")
    rows_sp, c_out = nn.linear_fwd(skip, params["gen_enc.out.w"], params["gen_enc.out.b"])
    n = lats.shape[0]
    rows = rows_sp.reshape(n, cfg.n_latent_rows, cfg.d_emb)
    return rows, skip, (c0, c1, c_out, n)


def gen_encode_bwd(drows, dskip, cache, grads, cfg):
    c0, c1, c_out, n = cache
    drows_sp = drows.reshape(n, cfg.feat_side, cfg.feat_side, cfg.d_emb)
    dskip_out, dw, db = nn.linear_bwd(drows_sp, c_out)
    grads["gen_enc.out.w"] += dw
    grads["gen_enc.out.b"] += db
    dh = dskip_out if dskip is None else dskip_out + dskip
    dh = nn.convnext_bwd(dh, c1, grads, "gen_enc.cnb1.")
    nn.convnext_bwd(dh, c0, grads, "gen_enc.cnb0.")


# --- generation decoder --------------------------------------------------------

def gen_decode_fwd(rows, skip, params, cfg):
    """Hidden rows (n,64,d_emb) + skip (n,8,8,c_skip) -> velocity (n,16,16,3)."""
    n = rows.shape[0]
    if rows.shape[1] != cfg.n_latent_rows:
        raise ValueError(f"gen_decode: expected {cfg.n_latent_rows} rows, got {rows.shape[1]}")
    grid = rows.reshape(n, cfg.feat_side, cfg.feat_side, cfg.d_emb)
    h, c_in = nn.linear_fwd(grid, params["gen_dec.inp.w"], params["gen_dec.inp.b"])
    hcat = np.concatenate([h, skip], axis=-1)
    h1, c0 = nn.convnext_fwd(hcat, params, "gen_dec.cnb0.")
    h2, c1 = nn.convnext_fwd(h1, params, "gen_dec.cnb1.")
    up = nn.pixel_shuffle2(h2)
    vel, c_out = nn.linear_fwd(up, params["gen_dec.out.w"], params["gen_dec.out.b"])
    return vel, (c_in, c0, c1, c_out, n)


def gen_decode_bwd(dvel, cache, grads, cfg):
    c_in, c0, c1, c_out, n = cache
    dup, dw, db = nn.linear_bwd(dvel, c_out)
    grads["gen_dec.out.w"] += dw
    grads["gen_dec.out.b"] += db
    dh2 = nn.patchify2x2(dup)  # exact inverse of pixel_shuffle2
    dh1 = nn.convnext_bwd(dh2, c1, grads, "gen_dec.cnb1.")
    dcat = nn.convnext_bwd(dh1, c0, grads, "gen_dec.cnb0.")
    dh, dskip = dcat[..., :cfg.c_dec], dcat[..., cfg.c_dec:]
    dgrid, dw, db = nn.linear_bwd(dh, c_in)
    grads["gen_dec.inp.w"] += dw
    grads["gen_dec.inp.b"] += db
    drows = dgrid.reshape(n, cfg.n_latent_rows, cfg.d_emb)
    return drows, dskip


# --- time embedding -------------------------------------------------------------

def time_features(t, d, dtype):
    """Sinusoidal features of t in [0,1]. The fastest component spans ~16
    periods over the unit interval: enough resolution for a 30-step grid
    while staying smooth between training draws and sampling times."""
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = 100.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    feat = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if d % 2:
        feat = np.pad(feat, ((0, 0), (0, 1)))
    return feat.astype(dtype)


def time_embed_fwd(t, params, cfg):
    feat = time_features(t, cfg.d_emb, params["time.w1"].dtype)
    h, c1 = nn.linear_fwd(feat, params["time.w1"], params["time.b1"])
    hg, cg = nn.gelu_fwd(h)
    rows, c2 = nn.linear_fwd(hg, params["time.w2"], params["time.b2"])
    return rows, (c1, cg, c2)


def time_embed_bwd(drows, cache, grads):
    c1, cg, c2 = cache
    dhg, dw2, db2 = nn.linear_bwd(drows, c2)
    grads["time.w2"] += dw2
    grads["time.b2"] += db2
    dh = nn.gelu_bwd(dhg, cg)
    _, dw1, db1 = nn.linear_bwd(dh, c1)
    grads["time.w1"] += dw1
    grads["time.b1"] += db1


# --- alignment head (3-layer MLP, GELU between layers) ---------------------------

def align_head_fwd(rows, params):
    h1, c1 = nn.linear_fwd(rows, params["align.w1"], params["align.b1"])
    g1, cg1 = nn.gelu_fwd(h1)
    h2, c2 = nn.linear_fwd(g1, params["align.w2"], params["align.b2"])
    g2, cg2 = nn.gelu_fwd(h2)
    out, c3 = nn.linear_fwd(g2, params["align.w3"], params["align.b3"])
    return out, (c1, cg1, c2, cg2, c3)


def align_head_bwd(dout, cache, grads):
    c1, cg1, c2, cg2, c3 = cache
    dg2, dw3, db3 = nn.linear_bwd(dout, c3)
    grads["align.w3"] += dw3
    grads["align.b3"] += db3
    dh2 = nn.gelu_bwd(dg2, cg2)
    dg1, dw2, db2 = nn.linear_bwd(dh2, c2)
    grads["align.w2"] += dw2
    grads["align.b2"] += db2
    dh1 = nn.gelu_bwd(dg1, cg1)
    drows, dw1, db1 = nn.linear_bwd(dh1, c1)
    grads["align.w1"] += dw1
    grads["align.b1"] += db1
    return drows
