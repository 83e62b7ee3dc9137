#!/usr/bin/env python3
"""Desk-scale Adam vs. OSP comparison (4 layers, d=128, ~20M tokens per run).

Trains both arms at each sweep LR, picks the best final eval loss per arm,
then measures kurtosis and 4-4-4 perplexity ratios.  Finished runs are
reused, so rerunning after an interruption only trains what is missing.

    python scripts/run_osp_experiment.py --corpus data/corpus.txt --out-dir runs/osp_experiment
"""

import argparse
import json
import logging

from osplab.experiment import DEFAULT_STEPS, SWEEP_LRS, run_desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--corpus", default="data/corpus.txt")
    ap.add_argument("--out-dir", default="runs/osp_experiment")
    ap.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="optimizer steps per run (4096 tokens each)")
    ap.add_argument("--lrs", default=",".join(f"{x:g}" for x in SWEEP_LRS))
    ap.add_argument("--arms", default="adam,osp")
    ap.add_argument("--interval", type=int, default=100, help="eval/diagnostics interval in steps")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    summary = run_desk_experiment(args.corpus, args.out_dir, total_steps=args.steps,
                                  lrs=[float(x) for x in args.lrs.split(",")], arms=args.arms.split(","),
                                  interval=args.interval)
    print(json.dumps(summary["best"], indent=2))


if __name__ == "__main__":
    main()
