#!/usr/bin/env python3
"""Full desk-scale pipeline: corpus -> three-stage training -> evaluation.

Writes everything under --workdir (corpus/, ckpt/, report.csv, sample PPMs).
With default settings this is the ~4,800-step toy run (roughly an hour of
CPU time); pass --smoke for a minutes-long sanity version.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from shapeflow import cli  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--smoke", action="store_true", help="tiny step counts")
    args = ap.parse_args()

    os.makedirs(args.workdir, exist_ok=True)
    cfg_path = os.path.join(args.workdir, "train.cfg")
    with open(cfg_path, "w") as f:
        f.write(f"seed = {args.seed}\nscale = 0.02\n")
        if args.smoke:
            f.write("stage1.steps = 20\nstage2.steps = 60\nstage3.steps = 20\n"
                    "stage1.batch = 8\nstage2.batch = 8\nstage3.batch = 8\n")

    corpus = os.path.join(args.workdir, "corpus")
    ckpt = os.path.join(args.workdir, "ckpt")
    steps = [
        ["data", "--seed", str(args.seed), "--out", corpus],
        ["train", "--config", cfg_path, "--corpus", corpus, "--out", ckpt],
        ["eval", "--ckpt", ckpt, "--corpus", corpus,
         "--report", os.path.join(args.workdir, "report.csv"),
         "--prompts", "60" if args.smoke else "500"],
        ["sample", "--ckpt", ckpt, "--prompt", "red circle top-left",
         "--seed", "0", "--out", os.path.join(args.workdir, "sample.ppm")],
    ]
    for argv in steps:
        print("== shapeflow", " ".join(argv))
        rc = cli.main(argv)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
