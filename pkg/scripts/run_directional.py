"""Speed/copy directional comparison over three seeds (writes directional.json)."""

import argparse
import json

from numcode.experiment import directional_study

parser = argparse.ArgumentParser()
parser.add_argument("--out-dir", default="runs/directional")
parser.add_argument("--steps", type=int, default=3000)
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
args = parser.parse_args()

summary = directional_study(args.out_dir, seeds=args.seeds, steps=args.steps, copy_steps=args.steps)
print(json.dumps({k: summary[k] for k in ("speed_median", "copy_median")}, indent=2))
print(f"total {sum(summary['seconds'].values()):.0f} s")
