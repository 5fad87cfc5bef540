"""Three-stage training driver.

Stage 1 adapts the randomly initialized adapters (projections, generation
encoder/decoder, time embedding, alignment head) around a frozen trunk;
stage 2 trains everything except the understanding encoder; stage 3
unfreezes it. All stages mix understanding / generation / text batches at
per-stage ratios and share one AdamW step per mixed batch. Freezing is
implemented by zeroing gradients, so optimizer state stays shape-stable.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone, generate, nn, understand
from .backbone import ModelConfig

ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.0
GRAD_CLIP = 1.0
EMA_RATIO = 0.99

# Reference schedule being scaled down: warmup (2000, 2000, 1000) and the
# stage-2 early-phase ratio override lasting 10000 steps.
BASE_WARMUP = (2000, 2000, 1000)
BASE_EARLY_STEPS = 10000
EARLY_RATIO = (30, 50, 20)

STAGE1_TRAINABLE = ("und_proj.", "gen_enc.", "gen_dec.", "time.", "align.")


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    lr: float
    warmup_steps: int
    total_steps: int
    batch_size: int
    ratio: tuple            # (und, gen, text), sums to 100
    early_ratio: tuple | None = None
    early_steps: int = 0

    def __post_init__(self):
        if sum(self.ratio) != 100 or min(self.ratio) < 0:
            raise ValueError(f"stage {self.stage_id}: ratio must be >=0 and sum to 100")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    scale: float = 0.02
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: tuple = ()
    cfg_w: float = 2.0
    cfg_steps: int = 30


def default_stages(scale=0.02):
    warm = [max(1, round(w * scale)) for w in BASE_WARMUP]
    early = max(1, round(BASE_EARLY_STEPS * scale))
    return (
        StageConfig(1, 1e-4, warm[0], 200, 32, (50, 50, 0)),
        StageConfig(2, 1e-4, warm[1], 4000, 32, (14, 80, 6),
                    early_ratio=EARLY_RATIO, early_steps=early),
        StageConfig(3, 2e-5, warm[2], 600, 16, (21, 70, 9)),
    )


def default_train_config(seed=0, scale=0.02, model=None):
    return TrainConfig(seed=seed, scale=scale, model=model or ModelConfig(),
                       stages=default_stages(scale))


# --- config file (`key = value` lines) -------------------------------------------

_STAGE_KEYS = ("steps", "batch", "lr", "ratio")


def parse_config_file(path):
    """Strict `key = value` parser for the documented key set."""
    raw = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()

    known = {"seed", "scale", "d_emb", "n_blocks", "n_heads", "d_enc",
             "repa_block", "cfg.w", "cfg.steps"}
    for i in (1, 2, 3):
        known |= {f"stage{i}.{k}" for k in _STAGE_KEYS}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")

    seed = int(raw.get("seed", 0))
    scale = float(raw.get("scale", 0.02))
    model = ModelConfig(
        d_emb=int(raw.get("d_emb", 64)),
        n_blocks=int(raw.get("n_blocks", 6)),
        n_heads=int(raw.get("n_heads", 4)),
        d_enc=int(raw.get("d_enc", 32)),
        repa_block=int(raw.get("repa_block", 3)),
    )
    stages = []
    for base in default_stages(scale):
        i = base.stage_id
        ratio = base.ratio
        if f"stage{i}.ratio" in raw:
            ratio = tuple(int(x) for x in raw[f"stage{i}.ratio"].split(":"))
        stages.append(replace(
            base,
            total_steps=int(raw.get(f"stage{i}.steps", base.total_steps)),
            batch_size=int(raw.get(f"stage{i}.batch", base.batch_size)),
            lr=float(raw.get(f"stage{i}.lr", base.lr)),
            ratio=ratio,
        ))
    return TrainConfig(seed=seed, scale=scale, model=model, stages=tuple(stages),
                       cfg_w=float(raw.get("cfg.w", 2.0)),
                       cfg_steps=int(raw.get("cfg.steps", 30)))


def write_config_file(config, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"seed = {config.seed}\n")
        f.write(f"scale = {config.scale}\n")
        m = config.model
        f.write(f"d_emb = {m.d_emb}\nn_blocks = {m.n_blocks}\nn_heads = {m.n_heads}\n")
        f.write(f"d_enc = {m.d_enc}\nrepa_block = {m.repa_block}\n")
        for s in config.stages:
            i = s.stage_id
            f.write(f"stage{i}.steps = {s.total_steps}\n")
            f.write(f"stage{i}.batch = {s.batch_size}\n")
            f.write(f"stage{i}.lr = {s.lr}\n")
            f.write(f"stage{i}.ratio = {s.ratio[0]}:{s.ratio[1]}:{s.ratio[2]}\n")
        f.write(f"cfg.w = {config.cfg_w}\ncfg.steps = {config.cfg_steps}\n")


def write_model_config(config, path):
    write_config_file(config, path)


# --- batch mixing ------------------------------------------------------------------

def mix_batch(corpus, ratio, batch_size, rng):
    """Each slot draws its task by ratio, then a uniform sample of that task."""
    splits = {"und": corpus.und, "gen": corpus.gen, "text": corpus.text}
    names = ("und", "gen", "text")
    for name, r in zip(names, ratio):
        if r > 0 and not splits[name]:
            raise ValueError(f"ratio assigns {r}% to empty split {name!r}")
    cuts = np.cumsum(np.asarray(ratio, dtype=np.float64) / 100.0)
    out = {"und": [], "gen": [], "text": []}
    for _ in range(batch_size):
        u = rng.random()
        task = names[int(np.searchsorted(cuts, u, side="right"))]
        pool = splits[task]
        out[task].append(pool[int(rng.integers(len(pool)))])
    return out


# --- optimizer ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0


def init_optimizer(params):
    return OptimizerState(m=nn.zeros_like_tree(params), v=nn.zeros_like_tree(params))


def adamw_step(params, grads, opt, lr_t, clip=GRAD_CLIP, betas=ADAM_BETAS,
               eps=ADAM_EPS, weight_decay=WEIGHT_DECAY):
    """Global-norm clip, then AdamW with bias correction."""
    sq = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradients; step aborted")
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(sq)
    scale = clip / norm if (clip and norm > clip) else 1.0

    b1, b2 = betas
    opt.step += 1
    t = opt.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k] * scale if scale != 1.0 else grads[k]
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * (g * g)
        mhat = opt.m[k] / c1
        vhat = opt.v[k] / c2
        upd = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            upd = upd + weight_decay * p
        p -= (lr_t * upd).astype(p.dtype)


def ema_update(ema, params, ratio=EMA_RATIO):
    # accumulate in float64: an unchanged tensor is then an exact fixed
    # point of its shadow (0.99 x + 0.01 x rounds back to x), so frozen
    # tensors and their EMA stay bit-identical through a stage
    for k, p in params.items():
        ema[k] = (ratio * ema[k].astype(np.float64)
                  + (1.0 - ratio) * p.astype(np.float64)).astype(p.dtype)


def frozen_names(stage_id, params):
    if stage_id == 1:
        return {k for k in params if not k.startswith(STAGE1_TRAINABLE)}
    if stage_id == 2:
        return {k for k in params if k.startswith("und_enc.")}
    return set()


# --- the training loop ----------------------------------------------------------------

def run_stage(stage, corpus, mp, model_cfg, rng, metrics, global_step=0,
              drop_rate=generate.DROP_RATE):
    """One stage: returns the updated global step. `metrics` collects
    (step, stage, task, loss) rows."""
    params = mp.tensors
    opt = init_optimizer(params)
    frozen = frozen_names(stage.stage_id, params)

    for step in range(1, stage.total_steps + 1):
        global_step += 1
        ratio = stage.ratio
        if stage.early_ratio is not None and step <= stage.early_steps:
            ratio = stage.early_ratio
        batch = mix_batch(corpus, ratio, stage.batch_size, rng)

        grads = nn.zeros_like_tree(params)
        step_losses = []
        for task in ("und", "text"):
            items = batch[task]
            if not items:
                continue
            if task == "und":
                pb = understand.pack_und_batch(items, model_cfg)
            else:
                pb = understand.pack_und_batch([], model_cfg, text_ids=items)
            loss, _ = understand.ar_loss_and_grads(pb, params, model_cfg, grads=grads)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite {task} loss at step {global_step}")
            step_losses.append((task, loss))
        if batch["gen"]:
            draws = generate.draw_flow_vars(rng, len(batch["gen"]), model_cfg, drop_rate)
            rf, repa, _ = generate.flow_losses(batch["gen"], params, model_cfg, draws,
                                               want_grads=True, grads=grads)
            if not (np.isfinite(rf) and np.isfinite(repa)):
                raise FloatingPointError(f"non-finite gen loss at step {global_step}")
            step_losses.append(("rf", rf))
            step_losses.append(("repa", repa))

        for name in frozen:
            grads[name][:] = 0.0
        lr_t = stage.lr * min(1.0, step / stage.warmup_steps)
        adamw_step(params, grads, opt, lr_t)
        ema_update(mp.ema, params)

        for task, loss in step_losses:
            metrics.append((global_step, stage.stage_id, task, loss))
    return global_step


def train(config, corpus, out_dir=None, log_every=0):
    """Run all three stages; optionally write checkpoint + metrics.csv."""
    mp = backbone.init_model_params(config.model, np.random.SeedSequence([config.seed, 0]))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    metrics = []
    step = 0
    for stage in config.stages:
        step = run_stage(stage, corpus, mp, config.model, rng, metrics, step)
        if log_every:
            tail = [m for m in metrics if m[1] == stage.stage_id][-4:]
            print(f"stage {stage.stage_id} done at step {step}: "
                  + ", ".join(f"{t}={v:.4f}" for _, _, t, v in tail))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        backbone.save_checkpoint(mp, out_dir, cfg=config)
        write_metrics_csv(metrics, os.path.join(out_dir, "metrics.csv"))
    return mp, metrics


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "stage", "task", "loss"])
        for row in metrics:
            wr.writerow([row[0], row[1], row[2], f"{row[3]:.8f}"])
