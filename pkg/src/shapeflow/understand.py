"""Multimodal understanding: masked next-token loss and greedy QA decoding.

Question-answering layout is [question][|BOI|][image rows][|EOI|][answer];
the loss covers only the answer span (plus its |EOS|), so condition and
pad targets can be mutated freely without changing the loss.
"""

from __future__ import annotations

import numpy as np

from . import backbone, encoders, nn
from .backbone import (IMG_UND, ROLE_COND, ROLE_RESP, TOK, Element, pack)
from .data import BOI_ID, EOI_ID, EOS_ID


def und_features(imgs, params, cfg):
    """Understanding encoder's feature maps, (n,8,8,d_und_feat)."""
    feats, _ = encoders.und_encode_fwd(imgs, params, cfg)
    return feats


def und_elements(sample):
    """Element layout for one QA sample (text question first, then image)."""
    els = [Element(TOK, token=t, role=ROLE_COND) for t in sample.question_tokens]
    els.append(Element(TOK, token=BOI_ID, role=ROLE_COND))
    els.append(Element(IMG_UND, image=sample.image))
    els.append(Element(TOK, token=EOI_ID, role=ROLE_COND))
    els += [Element(TOK, token=t, role=ROLE_RESP) for t in sample.answer_tokens]
    return els


def text_elements(ids):
    """Text-only sample: next-token loss over the whole sentence."""
    return [Element(TOK, token=t, role=ROLE_RESP) for t in ids]


def pack_und_batch(samples, cfg, text_ids=()):
    layouts = [und_elements(s) for s in samples]
    layouts += [text_elements(ids) for ids in text_ids]
    return pack(layouts, cfg)


def ar_loss_from_logits(logits, targets, loss_mask):
    """Mean NLL over loss-masked positions; everything else contributes 0."""
    n = int(loss_mask.sum())
    if n == 0:
        raise ValueError("ar_loss: batch has no response positions")
    lg = logits[loss_mask]
    tg = targets[loss_mask]
    m = lg.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lg - m).sum(axis=-1))
    nll = lse - lg[np.arange(n), tg]
    return float(nll.mean())


def ar_loss(batch, params, cfg):
    fw = backbone.forward(batch, params, cfg)
    return ar_loss_from_logits(fw.logits, batch.targets, batch.loss_mask)


def ar_loss_and_grads(batch, params, cfg, grads=None):
    """Loss plus parameter gradients (allocates a fresh tree unless given)."""
    fw = backbone.forward(batch, params, cfg, want_cache=True)
    loss = ar_loss_from_logits(fw.logits, batch.targets, batch.loss_mask)
    n = int(batch.loss_mask.sum())
    probs = nn.softmax(fw.logits, axis=-1)
    d_logits = np.zeros_like(fw.logits)
    d_logits[batch.loss_mask] = probs[batch.loss_mask]
    rows = np.nonzero(batch.loss_mask)
    d_logits[rows[0], rows[1], batch.targets[batch.loss_mask]] -= 1.0
    d_logits /= n
    if grads is None:
        grads = nn.zeros_like_tree(params)
    backbone.backward(batch, fw, params, cfg, grads, d_logits=d_logits)
    return loss, grads


def answer(img, question_ids, params, cfg, max_len=4):
    """Greedy decode; stops at |EOS| or max_len tokens. Ties break to the
    lowest token id (argmax returns the first maximum)."""
    prefix = [Element(TOK, token=t, role=ROLE_COND) for t in question_ids]
    prefix.append(Element(TOK, token=BOI_ID, role=ROLE_COND))
    prefix.append(Element(IMG_UND, image=img))
    prefix.append(Element(TOK, token=EOI_ID, role=ROLE_COND))
    out = []
    for _ in range(max_len):
        els = prefix + [Element(TOK, token=t, role=ROLE_RESP) for t in out]
        n = sum(backbone.element_len(e, cfg) for e in els)
        batch = backbone.replace_l_max_pack([els], cfg, n)
        fw = backbone.forward(batch, params, cfg)
        nxt = int(np.argmax(fw.logits[0, n - 1]))
        out.append(nxt)
        if nxt == EOS_ID:
            break
    return out
