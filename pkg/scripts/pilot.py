"""Pilot: all-zero vs default loss weights on the planted workload, over a few seeds.

    python scripts/pilot.py --seeds 0 1 2 --out pilot.jsonl
"""
import argparse
import json
import time

from moenc.objective import DEFAULT_WEIGHTS, LossWeights
from moenc.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=TrainConfig.steps)
    ap.add_argument("--router", default="ca")
    ap.add_argument("--out", default=None, help="append JSON lines here")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        for name, w in (("zero", LossWeights.zeros()), ("default", DEFAULT_WEIGHTS)):
            t0 = time.time()
            s = train(TrainConfig(weights=w, seed=seed, steps=args.steps, router=args.router)).stats
            row = {"seed": seed, "weights": name, "seconds": round(time.time() - t0, 1), **s.summary()}
            rows.append(row)
            print(f"seed {seed} {name:>7}: range {s.range_gap:5.1f}  recovery {s.expert_recovery_accuracy:.3f}  "
                  f"acc {s.task_accuracy:.3f}  counts {s.selection_counts}  ({row['seconds']}s)")
    if args.out:
        with open(args.out, "a") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
