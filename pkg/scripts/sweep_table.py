"""Loss-weight ablation on the planted workload (the nine-row grid), printed as a table.

Takes about two minutes on one core.  Use ``moenc sweep`` for the persisted version.
"""
import argparse

from moenc.trainer import ABLATION_GRID, TrainConfig, sweep_lambdas


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--router", default="ca")
    args = ap.parse_args()
    rows = sweep_lambdas(ABLATION_GRID, TrainConfig(seed=args.seed, router=args.router))
    print(f"{'be':>4} {'ie':>4} {'ba':>4} {'ia':>4} | {'acc':>6} {'range':>6} {'recovery':>8}")
    for r in rows:
        w = r.weights
        print(f"{w.be:>4.1f} {w.ie:>4.1f} {w.ba:>4.1f} {w.ia:>4.1f} | "
              f"{r.task_accuracy:>6.3f} {r.range_gap:>6.1f} {r.expert_recovery_accuracy:>8.3f}")


if __name__ == "__main__":
    main()
