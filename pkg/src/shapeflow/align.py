"""Representation-alignment regularizer for generation training.

Mid-transformer hidden states at the latent positions are projected by a
small MLP and pulled towards the understanding encoder's features of the
clean target image, one cosine per spatial location. The target side is
stop-gradient: the understanding encoder never learns from this loss.
"""

from __future__ import annotations

import numpy as np

from . import encoders

COS_EPS = 1e-8
_NORM_FLOOR = 1e-30  # keeps the norm derivative defined at exactly zero vectors


def cosine_align_core(pred, target):
    """-mean location-wise cosine, plus the gradient w.r.t. `pred`.

    pred/target: (..., C), cosines taken over the last axis and averaged
    over everything else. `target` is treated as a constant.
    """
    if pred.shape != target.shape:
        raise ValueError(f"align: shape mismatch {pred.shape} vs {target.shape}")
    dot = (pred * target).sum(axis=-1, keepdims=True)
    pn = np.sqrt((pred * pred).sum(axis=-1, keepdims=True))
    tn = np.sqrt((target * target).sum(axis=-1, keepdims=True))
    denom = (pn + COS_EPS) * (tn + COS_EPS)
    cos = dot / denom
    n_loc = int(np.prod(pred.shape[:-1]))
    loss = -float(cos.sum()) / n_loc
    # d cos / d pred = t/denom - dot * (p/|p|) / (denom * (|p|+eps))
    p_dir = pred / np.maximum(pn, _NORM_FLOOR)
    dpred = -(target / denom - dot * p_dir / (denom * (pn + COS_EPS))) / n_loc
    return loss, dpred


def project_hidden(hidden_rows, params, cfg):
    """Alignment-head projection of latent-position hidden rows, reshaped to
    (n, feat, feat, d_und_feat)."""
    rows = np.asarray(hidden_rows)
    squeeze = rows.ndim == 2
    if squeeze:
        rows = rows[None]
    if rows.shape[1] != cfg.n_latent_rows:
        raise ValueError(f"align: expected {cfg.n_latent_rows} hidden rows, got {rows.shape[1]}")
    out, cache = encoders.align_head_fwd(rows, params)
    proj = out.reshape(rows.shape[0], cfg.feat_side, cfg.feat_side, cfg.d_und_feat)
    return proj, cache, squeeze


def repa_loss(hidden_rows, clean_image, params, cfg):
    """Alignment loss for one generation sample (or a stacked batch)."""
    proj, _, squeezed = project_hidden(hidden_rows, params, cfg)
    imgs = np.asarray(clean_image, dtype=proj.dtype)
    if squeezed:
        imgs = imgs[None]
    target, _ = encoders.und_encode_fwd(imgs, params, cfg)  # stop-grad side
    loss, _ = cosine_align_core(proj, target)
    return loss
