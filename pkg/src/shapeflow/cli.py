"""Command-line entry point for scripted use (CI and experiment drivers).

Exit codes: 0 success, 1 runtime failure, 2 usage error. All randomness
flows from explicit seeds; nothing reads the clock.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import backbone, data, evalkit, gradcheck, sampler, trainer
from .sampler import SamplerConfig

GRADCHECK_TOL = 1e-4


def _build_parser():
    p = argparse.ArgumentParser(prog="shapeflow")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="generate and export a corpus")
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--n-und", type=int, default=2000)
    d.add_argument("--n-gen", type=int, default=4000)
    d.add_argument("--n-text", type=int, default=1000)

    t = sub.add_parser("train", help="run the three-stage training protocol")
    t.add_argument("--config", required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")

    s = sub.add_parser("sample", help="generate one image from a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--w", type=float, default=2.0)
    s.add_argument("--steps", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="headline metrics on a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--prompts", type=int, default=500)

    w = sub.add_parser("sweep", help="CFG factor / step-count sweep")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--w", default="1,2,3,6")
    w.add_argument("--steps", default="10,30,50")
    w.add_argument("--out", required=True)
    w.add_argument("--prompts", type=int, default=60)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--max-coords", type=int, default=24)

    a = sub.add_parser("ablate", help="decoupled vs shared encoder comparison")
    a.add_argument("--config", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    return p


def _load_ckpt(path):
    mp = backbone.load_checkpoint(path)
    cfg_path = os.path.join(path, "config.txt")
    if os.path.exists(cfg_path):
        return mp, trainer.parse_config_file(cfg_path)
    return mp, trainer.default_train_config()


def _cmd_data(args):
    corpus = data.make_corpus(args.seed, args.n_und, args.n_gen, args.n_text)
    data.save_corpus(corpus, args.out)
    print(f"wrote corpus ({args.n_und} und / {args.n_gen} gen / {args.n_text} text) to {args.out}")
    return 0


def _cmd_train(args):
    config = trainer.parse_config_file(args.config)
    corpus = data.load_corpus(args.corpus)
    trainer.train(config, corpus, out_dir=args.out,
                  log_every=0 if args.quiet else 1)
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_sample(args):
    mp, config = _load_ckpt(args.ckpt)
    ids = data.tokenize(args.prompt)
    scfg = SamplerConfig(w=args.w, n_steps=args.steps, seed=args.seed)
    img = sampler.generate_image(ids, mp.ema, config.model, scfg)
    sampler.write_ppm(img, args.out)
    label = data.oracle_classify(img)
    print(f"wrote {args.out} (oracle: {label})")
    return 0


def _cmd_eval(args):
    mp, config = _load_ckpt(args.ckpt)
    corpus = data.load_corpus(args.corpus)
    scfg = SamplerConfig(w=config.cfg_w, n_steps=config.cfg_steps, seed=0)
    report = evalkit.evaluate(mp, config.model, corpus, scfg, n_prompts=args.prompts)
    report.save_csv(args.report)
    for k, v in report.to_rows():
        print(f"{k} = {v:.4f}")
    return 0


def _cmd_sweep(args):
    mp, config = _load_ckpt(args.ckpt)
    w_list = [float(x) for x in args.w.split(",")]
    steps_list = [int(x) for x in args.steps.split(",")]
    rng = np.random.default_rng(99)
    specs = data.all_specs()
    prompts = [specs[int(rng.integers(len(specs)))] for _ in range(args.prompts)]
    refs = [data.render_shape(s) for s in prompts]
    rows = evalkit.sweep(mp.ema, w_list, steps_list, config.model, prompts, refs,
                         out_csv=args.out)
    for w, n, acc, fmd in rows:
        print(f"w={w} steps={n}: accuracy={acc:.3f} fmd={fmd:.4f}")
    return 0


def _cmd_gradcheck(args):
    results = gradcheck.gradient_suite(max_coords=args.max_coords, verbose=True)
    ok = all(v <= GRADCHECK_TOL for v in results.values())
    print("gradient suite:", "PASS" if ok else "FAIL",
          {k: f"{v:.2e}" for k, v in results.items()})
    return 0 if ok else 1


def _cmd_ablate(args):
    config = trainer.parse_config_file(args.config)
    corpus = data.load_corpus(args.corpus)
    eval_corpus = data.make_corpus(config.seed + 1000, 120, 0, 0)
    dec, shc = evalkit.ablate_encoders(corpus, eval_corpus, config)
    import csv
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["variant", "metric", "value"])
        for tag, rep in (("decoupled", dec), ("shared", shc)):
            for k, v in rep.to_rows():
                wr.writerow([tag, k, f"{v:.6f}"])
    print(f"decoupled und_accuracy={dec.und_accuracy:.3f} "
          f"shared und_accuracy={shc.und_accuracy:.3f}")
    return 0


_COMMANDS = {
    "data": _cmd_data, "train": _cmd_train, "sample": _cmd_sample,
    "eval": _cmd_eval, "sweep": _cmd_sweep, "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
