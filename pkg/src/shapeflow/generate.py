"""Image generation path: conditional rectified-flow training objective.

A noisy latent z_t = t*x + (1-t)*z0 rides through the transformer as a row
block [prompt][|BOI|][time][latent rows]; the decoder turns the final
hidden rows back into a velocity field that is regressed on x - z0. Time
is sampled logit-normal and 10% of prompts are dropped so the sampler can
do classifier-free guidance later.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import align, backbone, encoders, nn
from .backbone import IMG_GEN, ROLE_COND, TIME, TOK, Element
from .data import BOI_ID

DROP_RATE = 0.1


def sample_time(rng, n=None):
    """Logit-normal draw(s): sigmoid of N(0,1); strictly inside (0,1)."""
    z = rng.standard_normal() if n is None else rng.standard_normal(n)
    return 1.0 / (1.0 + np.exp(-z))


def interpolate(x, z0, t):
    """Straight-line point z_t between noise (t=0) and data (t=1)."""
    t = np.asarray(t, dtype=x.dtype)
    while t.ndim < x.ndim:
        t = t[..., None]
    return t * x + (1.0 - t) * z0


@dataclass
class FlowDraws:
    t: np.ndarray      # (n,)
    z0: np.ndarray     # (n, 16, 16, 3)
    drop: np.ndarray   # (n,) bool


def draw_flow_vars(rng, n, cfg, drop_rate=DROP_RATE):
    """Per-sample stochastic draws, in a fixed consumption order."""
    t = sample_time(rng, n)
    z0 = rng.standard_normal((n, cfg.img_side, cfg.img_side, cfg.d_latent))
    drop = rng.random(n) < drop_rate
    return FlowDraws(t=t, z0=z0, drop=drop)


def gen_elements(caption_ids, t, z_t, dropped=False):
    """[prompt][|BOI|][time][latent rows]; a dropped prompt keeps |BOI|."""
    els = []
    if not dropped:
        els = [Element(TOK, token=tok, role=ROLE_COND) for tok in caption_ids]
    els.append(Element(TOK, token=BOI_ID, role=ROLE_COND))
    els.append(Element(TIME, t=float(t)))
    els.append(Element(IMG_GEN, image=z_t))
    return els


def _gather_rows(states, positions, k):
    return np.stack([states[r, s:s + k] for r, s in positions])


def flow_losses(samples, params, cfg, draws, want_grads=False, grads=None,
                terms=("rf", "repa"), align_targets=None):
    """Rectified-flow MSE + alignment loss over a generation batch.

    `draws` carries the frozen stochastic draws, so with a fixed rng the
    whole computation is deterministic (the gradient checker relies on
    that). `terms` selects which loss terms feed the backward pass.
    `align_targets` overrides the stop-gradient feature targets; the
    gradient checker freezes them the same way it freezes the draws.
    Returns (rf, align, grads-or-None).
    """
    if not samples:
        raise ValueError("flow_losses: empty batch")
    dtype = params["embed.tok"].dtype
    x = np.stack([s.image for s in samples]).astype(dtype)
    z0 = draws.z0.astype(dtype)
    z_t = interpolate(x, z0, draws.t.astype(dtype))
    target = x - z0

    layouts = [gen_elements(s.caption_tokens, draws.t[i], z_t[i], bool(draws.drop[i]))
               for i, s in enumerate(samples)]
    batch = backbone.pack(layouts, cfg)
    fw = backbone.forward(batch, params, cfg, want_cache=want_grads)

    k = cfg.n_latent_rows
    final_rows = _gather_rows(fw.final, batch.gen_pos, k)
    vel, dec_cache = encoders.gen_decode_fwd(final_rows, fw.gen_skips, params, cfg)
    diff = vel - target
    rf = float((diff * diff).mean())

    mid_rows = _gather_rows(fw.hidden[cfg.repa_block], batch.gen_pos, k)
    proj, align_cache, _ = align.project_hidden(mid_rows, params, cfg)
    if align_targets is None:
        align_targets, _ = encoders.und_encode_fwd(x, params, cfg)  # stop-grad
    repa, d_proj = align.cosine_align_core(proj, align_targets.astype(dtype))

    if not want_grads:
        return rf, repa, None
    if grads is None:
        grads = nn.zeros_like_tree(params)

    d_final = None
    d_skip = None
    if "rf" in terms:
        d_vel = (2.0 / diff.size) * diff
        d_rows, d_skip = encoders.gen_decode_bwd(d_vel, dec_cache, grads, cfg)
        d_final = np.zeros_like(fw.final)
        for i, (r, s) in enumerate(batch.gen_pos):
            d_final[r, s:s + k] += d_rows[i]

    d_hidden_at = None
    if "repa" in terms:
        d_mid_rows = encoders.align_head_bwd(
            d_proj.reshape(len(samples), k, cfg.d_und_feat), align_cache, grads)
        d_mid = np.zeros_like(fw.final)
        for i, (r, s) in enumerate(batch.gen_pos):
            d_mid[r, s:s + k] += d_mid_rows[i]
        d_hidden_at = {cfg.repa_block: d_mid}

    backbone.backward(batch, fw, params, cfg, grads, d_final=d_final,
                      d_hidden_at=d_hidden_at, d_gen_skip=d_skip)
    return rf, repa, grads


def rf_loss(samples, params, cfg, rng, drop_rate=DROP_RATE):
    """Training-objective value for a batch (fresh stochastic draws)."""
    draws = draw_flow_vars(rng, len(samples), cfg, drop_rate)
    rf, _, _ = flow_losses(samples, params, cfg, draws)
    return rf


def velocity(z, t, condition_ids, params, cfg):
    """Velocity field at (z, t) under a prompt; empty prompt = unconditional."""
    layout = gen_elements(tuple(condition_ids), t, np.asarray(z), dropped=False)
    n = sum(backbone.element_len(e, cfg) for e in layout)
    batch = backbone.replace_l_max_pack([layout], cfg, n)
    fw = backbone.forward(batch, params, cfg)
    rows = _gather_rows(fw.final, batch.gen_pos, cfg.n_latent_rows)
    vel, _ = encoders.gen_decode_fwd(rows, fw.gen_skips, params, cfg)
    return vel[0]
