"""Quantitative evaluation: oracle-graded generation accuracy, a feature-
moment Frechet distance over a fixed random-weight conv net, exact-match
QA accuracy, CFG/step sweeps, and the decoupled-vs-shared encoder ablation
harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, data, nn, sampler, trainer, understand
from .backbone import ModelConfig
from .sampler import SamplerConfig


@dataclass
class EvalReport:
    semantic_accuracy: float = 0.0
    und_accuracy: float = 0.0
    fmd: float = 0.0
    attribute_accuracy: dict = field(default_factory=dict)  # shape/color/position

    def to_rows(self):
        rows = [("semantic_accuracy", self.semantic_accuracy),
                ("und_accuracy", self.und_accuracy),
                ("fmd", self.fmd)]
        rows += [(f"acc_{k}", v) for k, v in sorted(self.attribute_accuracy.items())]
        return rows

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            wr = csv.writer(f)
            wr.writerow(["metric", "value"])
            for k, v in self.to_rows():
                wr.writerow([k, f"{v:.6f}"])

    @classmethod
    def load_csv(cls, path):
        rep = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                k, v = row["metric"], float(row["value"])
                if k.startswith("acc_"):
                    rep.attribute_accuracy[k[4:]] = v
                else:
                    setattr(rep, k, v)
        return rep


def semantic_accuracy(params, prompts, model_cfg, sampler_cfg, velocity_fn=None):
    """Generate one image per prompt spec (seeds 0..n-1) and grade with the
    classification oracle. Returns (accuracy, per-attribute dict, images)."""
    if not prompts:
        raise ValueError("semantic_accuracy: need at least one prompt")
    hits = 0
    attr_hits = {"shape": 0, "color": 0, "position": 0}
    images = []
    for i, spec in enumerate(prompts):
        scfg = replace(sampler_cfg, seed=sampler_cfg.seed + i)
        ids = data.tokenize(data.caption_text(spec))
        img = sampler.generate_image(ids, params, model_cfg, scfg, velocity_fn)
        images.append(img)
        label = data.oracle_classify(img)
        if label is not None:
            for attr in attr_hits:
                if getattr(label, attr) == getattr(spec, attr):
                    attr_hits[attr] += 1
            if label == spec:
                hits += 1
    n = len(prompts)
    return hits / n, {k: v / n for k, v in attr_hits.items()}, images


def und_accuracy(params, samples, model_cfg, max_len=4):
    """Exact-match accuracy of greedy answers against the references."""
    if not samples:
        raise ValueError("und_accuracy: need at least one sample")
    hits = 0
    for s in samples:
        got = understand.answer(s.image, s.question_tokens, params, model_cfg,
                                max_len=max_len)
        hits += got == list(s.answer_tokens)
    return hits / len(samples)


# --- feature-moment Frechet distance ----------------------------------------------
# Fixed random-weight extractor (seed 0): 3 stride-2 conv layers + GELU,
# then a global spatial average to 32 features.

_FEAT_CHANNELS = (8, 16, 32)


def _feature_net_params():
    rng = np.random.default_rng(0)
    params = []
    cin = 3
    for cout in _FEAT_CHANNELS:
        w = rng.normal(0.0, 1.0 / np.sqrt(9 * cin), size=(3, 3, cin, cout))
        params.append((w.astype(np.float64), np.zeros(cout)))
        cin = cout
    return params


_FEATURE_PARAMS = _feature_net_params()


def image_features(imgs):
    """(n,16,16,3) -> (n,32) embeddings from the frozen random conv net."""
    h = np.asarray(imgs, dtype=np.float64)
    for w, b in _FEATURE_PARAMS:
        h, _ = nn.conv3x3_fwd(h, w, b, stride=2)
        h, _ = nn.gelu_fwd(h)
    return h.mean(axis=(1, 2))


def _psd_sqrt_trace(a, b):
    """tr((a b)^{1/2}) via the symmetric product b^{1/2} a b^{1/2}."""
    eb, vb = np.linalg.eigh(b)
    b_half = (vb * np.sqrt(np.clip(eb, 0.0, None))) @ vb.T
    m = b_half @ a @ b_half
    ev = np.linalg.eigvalsh((m + m.T) / 2.0)
    return float(np.sqrt(np.clip(ev, 0.0, None)).sum())


def feature_frechet(set_a, set_b, min_images=50):
    """Frechet distance between Gaussian moment fits of the two image sets."""
    if len(set_a) < min_images or len(set_b) < min_images:
        raise ValueError(f"feature_frechet: need >= {min_images} images per set")
    fa, fb = image_features(set_a), image_features(set_b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    ca = np.cov(fa, rowvar=False)
    cb = np.cov(fb, rowvar=False)
    d2 = float(((mu_a - mu_b) ** 2).sum())
    return d2 + float(np.trace(ca) + np.trace(cb)) - 2.0 * _psd_sqrt_trace(ca, cb)


# --- sweeps ---------------------------------------------------------------------------

def sweep(params, w_list, steps_list, model_cfg, prompts, ref_images, out_csv=None,
          base_seed=0):
    """Cross product of CFG factors and step counts; fixed prompts/seeds."""
    if not w_list or not steps_list:
        raise ValueError("sweep: w_list and steps_list must be nonempty")
    rows = []
    for w in w_list:
        for n_steps in steps_list:
            scfg = SamplerConfig(w=w, n_steps=n_steps, seed=base_seed)
            acc, _, images = semantic_accuracy(params, prompts, model_cfg, scfg)
            fmd = feature_frechet(images, ref_images) if len(images) >= 50 else float("nan")
            rows.append((w, n_steps, acc, fmd))
    if out_csv:
        with open(out_csv, "w", newline="", encoding="utf-8") as f:
            wr = csv.writer(f)
            wr.writerow(["w", "steps", "semantic_accuracy", "fmd"])
            for row in rows:
                wr.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])
    return rows


# --- full evaluation -------------------------------------------------------------------

def evaluate(mp, model_cfg, eval_corpus, sampler_cfg, n_prompts=500, rng_seed=1234):
    """Headline metrics on EMA weights: semantic accuracy over repeated
    prompt sweeps, QA accuracy, and the Frechet analogue vs clean renders."""
    rng = np.random.default_rng(rng_seed)
    specs = data.all_specs()
    prompts = [specs[int(rng.integers(len(specs)))] for _ in range(n_prompts)]
    acc, attr, images = semantic_accuracy(mp.ema, prompts, model_cfg, sampler_cfg)
    refs = [data.render_shape(s) for s in prompts]
    fmd = feature_frechet(images, refs) if n_prompts >= 50 else float("nan")
    uacc = und_accuracy(mp.ema, eval_corpus.und, model_cfg)
    return EvalReport(semantic_accuracy=acc, und_accuracy=uacc, fmd=fmd,
                      attribute_accuracy=attr)


# --- encoder ablation -------------------------------------------------------------------

def ablate_encoders(corpus, eval_corpus, config, log_every=0):
    """Train decoupled vs shared-encoder variants on identical data streams
    and seeds; report both. Returns (decoupled EvalReport, shared EvalReport)."""
    reports = []
    for shared in (False, True):
        cfg = replace(config, model=replace(config.model, shared_encoders=shared))
        mp, _ = trainer.train(cfg, corpus, log_every=log_every)
        scfg = SamplerConfig(w=cfg.cfg_w, n_steps=cfg.cfg_steps, seed=0)
        reports.append(evaluate(mp, cfg.model, eval_corpus, scfg, n_prompts=60))
    return reports[0], reports[1]
