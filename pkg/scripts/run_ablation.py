#!/usr/bin/env python3
"""Decoupled vs shared vision-encoder comparison at matched budgets.

Trains both variants on identical data streams and seeds, then reports
understanding accuracy side by side (the decoupled design should win).
"""

import argparse
import os
import sys
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np  # noqa: E402

from shapeflow import data, evalkit, trainer  # noqa: E402


def ablation_config(seed, steps_scale=1.0):
    stages = []
    for s, steps in zip(trainer.default_stages(0.02), (50, 400, 100)):
        stages.append(replace(s, total_steps=max(1, round(steps * steps_scale)),
                              batch_size=16))
    return trainer.TrainConfig(seed=seed, scale=0.02, stages=tuple(stages),
                               model=trainer.ModelConfig(), cfg_w=2.0, cfg_steps=30)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--steps-scale", type=float, default=1.0)
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()

    corpus = data.make_corpus(0, 2000, 4000, 1000)
    rows = []
    for rep in range(args.reps):
        cfg = ablation_config(seed=rep, steps_scale=args.steps_scale)
        eval_corpus = data.make_corpus(5000 + rep, 120, 0, 0)
        dec, shc = evalkit.ablate_encoders(corpus, eval_corpus, cfg)
        rows.append((rep, dec.und_accuracy, shc.und_accuracy))
        print(f"rep {rep}: decoupled={dec.und_accuracy:.3f} shared={shc.und_accuracy:.3f}")

    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w") as f:
        f.write("rep,decoupled_und_accuracy,shared_und_accuracy\n")
        for rep, d, s in rows:
            f.write(f"{rep},{d:.6f},{s:.6f}\n")
    wins = sum(1 for _, d, s in rows if d >= s)
    print(f"decoupled >= shared in {wins}/{len(rows)} repetitions")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
