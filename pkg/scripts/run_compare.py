"""Train and evaluate all four variants on one task under a shared seed and budget."""

import argparse

from numcode.experiment import RunConfig, compare

parser = argparse.ArgumentParser()
parser.add_argument("--out-dir", default="runs/compare")
parser.add_argument("--task", default="speed", choices=("speed", "traj", "copy"))
parser.add_argument("--steps", type=int, default=3000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

cfg = RunConfig(task=args.task, steps=args.steps, seed=args.seed, data_seed=args.seed)
for row in compare(cfg, args.out_dir):
    print(f"{row['variant']:<10} headline MAE {row['headline']:.4f}  parse failures {row['parse_failures']}")
