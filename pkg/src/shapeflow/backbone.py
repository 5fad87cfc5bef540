"""Shared causal transformer over packed multimodal sequences.

Sequences interleave text tokens, understanding-image rows, a time token
and generation-latent rows. Multiple samples are packed first-fit into
fixed-length rows; attention masks are block-diagonal causal so packing
can never leak information between samples. Per-block hidden states stay
retrievable (the alignment regularizer reads one of them).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoders, nn
from .data import BOI_ID, EOI_ID, PAD_ID, VOCAB


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 64
    n_blocks: int = 6
    n_heads: int = 4
    l_max: int = 256
    vocab_size: int = len(VOCAB)
    repa_block: int = 3       # block whose output feeds the alignment head
    d_enc: int = 32           # understanding feature channels
    img_side: int = 16
    feat_side: int = 8        # 8x8 grids on both vision paths
    d_latent: int = 3
    c_dec: int = 52           # decoder width before the skip concat
    shared_encoders: bool = False

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ValueError("d_emb must divide by n_heads")
        if not 1 <= self.repa_block <= self.n_blocks:
            raise ValueError("repa_block out of range")

    @property
    def c_skip(self):
        return 4 * self.d_latent  # channels after 2x2 patchify

    @property
    def n_latent_rows(self):
        return self.feat_side * self.feat_side

    @property
    def d_und_feat(self):
        return self.c_skip if self.shared_encoders else self.d_enc


# --- sequence elements -----------------------------------------------------

TOK, IMG_UND, IMG_GEN, TIME = "tok", "img_und", "img_gen", "time"
ROLE_PAD, ROLE_COND, ROLE_RESP, ROLE_LATENT = 0, 1, 2, 3


@dataclass
class Element:
    kind: str
    token: int = -1
    image: np.ndarray | None = None  # clean image (und) or z_t latent (gen)
    t: float = 0.0
    role: int = ROLE_COND


def element_len(el, cfg):
    return cfg.n_latent_rows if el.kind in (IMG_UND, IMG_GEN) else 1


def _validate_layout(elements):
    """Image blocks need their sentinel tokens; time must sit between the
    generation |BOI| and the latent rows (so latents can attend to it)."""
    for i, el in enumerate(elements):
        if el.kind == IMG_UND:
            prev = elements[i - 1] if i else None
            nxt = elements[i + 1] if i + 1 < len(elements) else None
            if prev is None or prev.kind != TOK or prev.token != BOI_ID:
                raise ValueError("understanding image without a preceding |BOI|")
            if nxt is None or nxt.kind != TOK or nxt.token != EOI_ID:
                raise ValueError("understanding image without a following |EOI|")
        elif el.kind == IMG_GEN:
            ok = (i >= 2 and elements[i - 1].kind == TIME
                  and elements[i - 2].kind == TOK and elements[i - 2].token == BOI_ID)
            if not ok:
                raise ValueError("generation latents must follow |BOI| and a time token")


@dataclass
class PackedBatch:
    """Layout of packed samples; embeddings are assembled at forward time."""
    l_max: int
    tok_ids: np.ndarray    # (B, L) int32, PAD_ID on non-token positions
    is_tok: np.ndarray     # (B, L) bool, True for tokens and pads
    roles: np.ndarray      # (B, L) int8
    attn_mask: np.ndarray  # (B, L, L) bool
    targets: np.ndarray    # (B, L) int32, meaningful only under loss_mask
    loss_mask: np.ndarray  # (B, L) bool
    und_imgs: np.ndarray   # (n_und, 16, 16, 3)
    und_pos: np.ndarray    # (n_und, 2) [row, start]
    gen_lats: np.ndarray   # (n_gen, 16, 16, 3)
    gen_pos: np.ndarray    # (n_gen, 2)
    gen_t: np.ndarray      # (n_gen,)
    time_pos: np.ndarray   # (n_gen, 2)
    spans: list = field(default_factory=list)  # (row, start, length) per sample

    @property
    def n_rows(self):
        return self.tok_ids.shape[0]


def pack(samples, cfg):
    """Greedy first-fit packing of per-sample element lists into L_max rows."""
    lengths = []
    for elements in samples:
        _validate_layout(elements)
        n = sum(element_len(el, cfg) for el in elements)
        if n > cfg.l_max:
            raise ValueError(f"sample of {n} positions exceeds L_max={cfg.l_max}")
        lengths.append(n)

    fills = []  # current length per row
    placement = []
    for n in lengths:
        for r, used in enumerate(fills):
            if used + n <= cfg.l_max:
                placement.append((r, used))
                fills[r] += n
                break
        else:
            placement.append((len(fills), 0))
            fills.append(n)
    b = max(1, len(fills))
    l = cfg.l_max

    tok_ids = np.full((b, l), PAD_ID, dtype=np.int32)
    is_tok = np.ones((b, l), dtype=bool)
    roles = np.full((b, l), ROLE_PAD, dtype=np.int8)
    targets = np.zeros((b, l), dtype=np.int32)
    loss_mask = np.zeros((b, l), dtype=bool)
    attn = np.zeros((b, l, l), dtype=bool)
    attn[:, np.arange(l), np.arange(l)] = True  # pads attend to themselves
    tril = np.tril(np.ones((l, l), dtype=bool))

    und_imgs, und_pos, gen_lats, gen_pos, gen_t, time_pos = [], [], [], [], [], []
    spans = []
    for elements, (row, start), n in zip(samples, placement, lengths):
        spans.append((row, start, n))
        attn[row, start:start + n, start:start + n] = tril[:n, :n]
        # flat per-position records for target derivation
        flat = []
        pos = start
        for el in elements:
            if el.kind == TOK:
                tok_ids[row, pos] = el.token
                roles[row, pos] = el.role
                flat.append((TOK, el.token, el.role))
                pos += 1
            elif el.kind == TIME:
                is_tok[row, pos] = False
                roles[row, pos] = ROLE_COND
                time_pos.append((row, pos))
                gen_t.append(el.t)
                flat.append((TIME, -1, ROLE_COND))
                pos += 1
            elif el.kind == IMG_UND:
                k = cfg.n_latent_rows
                is_tok[row, pos:pos + k] = False
                roles[row, pos:pos + k] = ROLE_COND
                und_imgs.append(el.image)
                und_pos.append((row, pos))
                flat.extend([(IMG_UND, -1, ROLE_COND)] * k)
                pos += k
            elif el.kind == IMG_GEN:
                k = cfg.n_latent_rows
                is_tok[row, pos:pos + k] = False
                roles[row, pos:pos + k] = ROLE_LATENT
                gen_lats.append(el.image)
                gen_pos.append((row, pos))
                flat.extend([(IMG_GEN, -1, ROLE_LATENT)] * k)
                pos += k
            else:
                raise ValueError(f"unknown element kind {el.kind!r}")
        # next-token targets: position i predicts i+1 when i+1 is a response token
        for j in range(n - 1):
            kind, token, role = flat[j + 1]
            if kind == TOK and role == ROLE_RESP:
                targets[row, start + j] = token
                loss_mask[row, start + j] = True

    def arr(x, shape, dtype=np.float32):
        return np.stack(x).astype(dtype) if x else np.zeros(shape, dtype=dtype)

    s = cfg.img_side
    return PackedBatch(
        l_max=l, tok_ids=tok_ids, is_tok=is_tok, roles=roles, attn_mask=attn,
        targets=targets, loss_mask=loss_mask,
        und_imgs=arr(und_imgs, (0, s, s, 3)),
        und_pos=np.asarray(und_pos, dtype=np.int32).reshape(-1, 2),
        gen_lats=arr(gen_lats, (0, s, s, cfg.d_latent)),
        gen_pos=np.asarray(gen_pos, dtype=np.int32).reshape(-1, 2),
        gen_t=np.asarray(gen_t, dtype=np.float64).reshape(-1),
        time_pos=np.asarray(time_pos, dtype=np.int32).reshape(-1, 2),
        spans=spans,
    )


# --- parameters -------------------------------------------------------------

@dataclass
class ModelParams:
    tensors: dict
    ema: dict


def init_model_params(cfg, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    d, v = cfg.d_emb, cfg.vocab_size
    p = {
        "embed.tok": nn.trunc_normal(rng, (v, d), dtype=dtype),
        "embed.pos": nn.trunc_normal(rng, (cfg.l_max, d), dtype=dtype),
    }
    for i in range(cfg.n_blocks):
        pre = f"blk{i}."
        p[pre + "ln1.g"] = np.ones(d, dtype=dtype)
        p[pre + "ln1.b"] = np.zeros(d, dtype=dtype)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + w] = nn.trunc_normal(rng, (d, d), dtype=dtype)
        p[pre + "ln2.g"] = np.ones(d, dtype=dtype)
        p[pre + "ln2.b"] = np.zeros(d, dtype=dtype)
        p[pre + "mlp.w1"] = nn.trunc_normal(rng, (d, 4 * d), dtype=dtype)
        p[pre + "mlp.b1"] = np.zeros(4 * d, dtype=dtype)
        p[pre + "mlp.w2"] = nn.trunc_normal(rng, (4 * d, d), dtype=dtype)
        p[pre + "mlp.b2"] = np.zeros(d, dtype=dtype)
    p["out_ln.g"] = np.ones(d, dtype=dtype)
    p["out_ln.b"] = np.zeros(d, dtype=dtype)
    p["head.w"] = nn.trunc_normal(rng, (d, v), dtype=dtype)
    p["head.b"] = np.zeros(v, dtype=dtype)
    p.update(encoders.init_encoder_params(rng, cfg, dtype=dtype))
    return ModelParams(tensors=p, ema={k: w.copy() for k, w in p.items()})


def param_count(params):
    return int(sum(v.size for v in params.values()))


# --- embedding assembly -------------------------------------------------------

def _assemble_embeddings(batch, params, cfg, want_cache):
    dtype = params["embed.tok"].dtype
    emb = params["embed.tok"][batch.tok_ids].astype(dtype, copy=True)
    cache = {}

    if len(batch.und_imgs):
        feats, c_enc = encoders.und_encode_fwd(batch.und_imgs.astype(dtype), params, cfg)
        n = feats.shape[0]
        flat = feats.reshape(n, cfg.n_latent_rows, cfg.d_und_feat)
        rows, c_proj = nn.linear_fwd(flat, params["und_proj.w"], params["und_proj.b"])
        for i, (r, s) in enumerate(batch.und_pos):
            emb[r, s:s + cfg.n_latent_rows] = rows[i]
        cache["und"] = (c_enc, c_proj, n)

    skips = None
    if len(batch.gen_lats):
        rows, skips, c_gen = encoders.gen_encode_fwd(batch.gen_lats.astype(dtype), params, cfg)
        for i, (r, s) in enumerate(batch.gen_pos):
            emb[r, s:s + cfg.n_latent_rows] = rows[i]
        trows, c_time = encoders.time_embed_fwd(batch.gen_t, params, cfg)
        for i, (r, s) in enumerate(batch.time_pos):
            emb[r, s] = trows[i]
        cache["gen"] = c_gen
        cache["time"] = c_time

    emb = emb + params["embed.pos"][None, :batch.l_max]
    return emb, skips, (cache if want_cache else None)


def embed(elements, params, cfg):
    """Embedding rows (+ role tags) for a single sample at packed offset 0."""
    _validate_layout(elements)
    n = sum(element_len(el, cfg) for el in elements)
    one = replace_l_max_pack([elements], cfg, n)
    emb, _, _ = _assemble_embeddings(one, params, cfg, want_cache=False)
    return emb[0, :n], one.roles[0, :n]


def replace_l_max_pack(samples, cfg, l_max):
    """pack() under a temporarily shortened row length (helper for embed/decoding)."""
    return pack(samples, replace(cfg, l_max=max(l_max, 1)))


# --- transformer forward / backward --------------------------------------------

@dataclass
class ForwardOut:
    hidden: list          # hidden[0] = embeddings, hidden[b] = block b output
    final: np.ndarray     # post final-layernorm states (B, L, D)
    logits: np.ndarray    # (B, L, V)
    gen_skips: np.ndarray | None
    cache: dict | None


def forward(batch, params, cfg, want_cache=False):
    emb, skips, emb_cache = _assemble_embeddings(batch, params, cfg, want_cache)
    nn.validate_causal_mask(batch.attn_mask)
    mask_add = nn.additive_mask(batch.attn_mask, emb.dtype)
    x = emb
    hidden = [x]
    blk_caches = []
    for i in range(cfg.n_blocks):
        pre = f"blk{i}."
        a_in, c_ln1 = nn.layernorm_fwd(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        a, c_att = nn.causal_attention_fwd(
            a_in, params[pre + "attn.wq"], params[pre + "attn.wk"],
            params[pre + "attn.wv"], params[pre + "attn.wo"],
            batch.attn_mask, cfg.n_heads, mask_add=mask_add, validate=False)
        x = x + a
        m_in, c_ln2 = nn.layernorm_fwd(x, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h, c_l1 = nn.linear_fwd(m_in, params[pre + "mlp.w1"], params[pre + "mlp.b1"])
        hg, c_ge = nn.gelu_fwd(h)
        m, c_l2 = nn.linear_fwd(hg, params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        x = x + m
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite activations after block {i}")
        hidden.append(x)
        blk_caches.append((c_ln1, c_att, c_ln2, c_l1, c_ge, c_l2))
    final, c_out = nn.layernorm_fwd(x, params["out_ln.g"], params["out_ln.b"])
    logits = final @ params["head.w"] + params["head.b"]
    cache = None
    if want_cache:
        cache = {"emb": emb_cache, "blocks": blk_caches, "out_ln": c_out, "final": final}
    return ForwardOut(hidden=hidden, final=final, logits=logits,
                      gen_skips=skips, cache=cache)


def backward(batch, fw, params, cfg, grads, d_logits=None, d_final=None,
             d_hidden_at=None, d_gen_skip=None):
    """Accumulate parameter gradients into `grads`.

    Gradient sources: `d_logits` (AR loss), `d_final` (velocity decoder,
    already scattered to (B,L,D)), `d_hidden_at` {block index: (B,L,D)}
    (alignment head), `d_gen_skip` (n_gen,8,8,c_skip) for the long skip.
    """
    cache = fw.cache
    if cache is None:
        raise ValueError("forward was run without want_cache=True")
    b, l, d = fw.final.shape
    dtype = fw.final.dtype
    d_hidden_at = d_hidden_at or {}

    dfinal = np.zeros((b, l, d), dtype=dtype)
    if d_logits is not None:
        grads["head.w"] += fw.final.reshape(-1, d).T @ d_logits.reshape(-1, cfg.vocab_size)
        grads["head.b"] += d_logits.reshape(-1, cfg.vocab_size).sum(axis=0)
        dfinal += d_logits @ params["head.w"].T
    if d_final is not None:
        dfinal += d_final

    dx, dg, db = nn.layernorm_bwd(dfinal, cache["out_ln"])
    grads["out_ln.g"] += dg
    grads["out_ln.b"] += db

    for i in reversed(range(cfg.n_blocks)):
        if (i + 1) in d_hidden_at:
            dx = dx + d_hidden_at[i + 1]
        pre = f"blk{i}."
        c_ln1, c_att, c_ln2, c_l1, c_ge, c_l2 = cache["blocks"][i]
        dhg, dw2, db2 = nn.linear_bwd(dx, c_l2)
        grads[pre + "mlp.w2"] += dw2
        grads[pre + "mlp.b2"] += db2
        dh = nn.gelu_bwd(dhg, c_ge)
        dm_in, dw1, db1 = nn.linear_bwd(dh, c_l1)
        grads[pre + "mlp.w1"] += dw1
        grads[pre + "mlp.b1"] += db1
        dres, dg2, dbb2 = nn.layernorm_bwd(dm_in, c_ln2)
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += dbb2
        dx = dx + dres
        da_in, dwq, dwk, dwv, dwo = nn.causal_attention_bwd(dx, c_att)
        grads[pre + "attn.wq"] += dwq
        grads[pre + "attn.wk"] += dwk
        grads[pre + "attn.wv"] += dwv
        grads[pre + "attn.wo"] += dwo
        dres, dg1, dbb1 = nn.layernorm_bwd(da_in, c_ln1)
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += dbb1
        dx = dx + dres
    if 0 in d_hidden_at:
        dx = dx + d_hidden_at[0]

    # dx is now the embedding gradient
    grads["embed.pos"][:l] += dx.sum(axis=0)
    flat_ids = batch.tok_ids[batch.is_tok]
    np.add.at(grads["embed.tok"], flat_ids, dx[batch.is_tok])

    emb_cache = cache["emb"]
    if "und" in emb_cache:
        c_enc, c_proj, n = emb_cache["und"]
        drows = np.stack([dx[r, s:s + cfg.n_latent_rows] for r, s in batch.und_pos])
        dfeat, dw, dbp = nn.linear_bwd(drows, c_proj)
        grads["und_proj.w"] += dw
        grads["und_proj.b"] += dbp
        dfeat = dfeat.reshape(n, cfg.feat_side, cfg.feat_side, cfg.d_und_feat)
        encoders.und_encode_bwd(dfeat, c_enc, grads)
    if "gen" in emb_cache:
        drows = np.stack([dx[r, s:s + cfg.n_latent_rows] for r, s in batch.gen_pos])
        encoders.gen_encode_bwd(drows, d_gen_skip, emb_cache["gen"], grads, cfg)
        dtrows = np.stack([dx[r, s] for r, s in batch.time_pos])
        encoders.time_embed_bwd(dtrows, emb_cache["time"], grads)
    return grads


# --- checkpoint io ----------------------------------------------------------------
# manifest.txt: one line per tensor "name dtype shape byte_offset";
# weights.bin: raw little-endian float32, concatenated in manifest order.

def save_checkpoint(mp: ModelParams, out_dir, cfg=None):
    os.makedirs(out_dir, exist_ok=True)
    entries = [(k, v) for k, v in sorted(mp.tensors.items())]
    entries += [("ema/" + k, v) for k, v in sorted(mp.ema.items())]
    offset = 0
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as mf, \
            open(os.path.join(out_dir, "weights.bin"), "wb") as wf:
        for name, v in entries:
            data = np.ascontiguousarray(v, dtype="<f4")
            shape = "x".join(map(str, v.shape)) if v.ndim else "scalar"
            mf.write(f"{name} f32 {shape} {offset}\n")
            wf.write(data.tobytes())
            offset += data.nbytes
    if cfg is not None:
        from .trainer import write_model_config
        write_model_config(cfg, os.path.join(out_dir, "config.txt"))


def load_checkpoint(in_dir):
    raw = np.fromfile(os.path.join(in_dir, "weights.bin"), dtype="<f4")
    tensors, ema = {}, {}
    with open(os.path.join(in_dir, "manifest.txt"), encoding="utf-8") as f:
        for line in f:
            name, dtype, shape, offset = line.split()
            if dtype != "f32":
                raise ValueError(f"unsupported dtype {dtype} for {name}")
            dims = () if shape == "scalar" else tuple(int(x) for x in shape.split("x"))
            n = int(np.prod(dims)) if dims else 1
            start = int(offset) // 4
            arr = raw[start:start + n].reshape(dims).copy()
            if name.startswith("ema/"):
                ema[name[4:]] = arr
            else:
                tensors[name] = arr
    return ModelParams(tensors=tensors, ema=ema)
