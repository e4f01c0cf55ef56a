"""Train all six variants on one synthetic split and write results/ablation.csv.

Usage: python3 scripts/run_ablation.py [--steps N] [--train K] [--quick]
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from dualpark.experiments import BenchmarkConfig, ordering_checks, quick, run_benchmark

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--train", type=int, default=None, help="training trajectories")
    ap.add_argument("--quick", action="store_true", help="20 trajectories, 50 steps")
    ap.add_argument("--out", type=Path, default=ROOT / "results")
    args = ap.parse_args()
    cfg = BenchmarkConfig()
    if args.quick:
        cfg = quick(cfg, 50)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    if args.train is not None:
        cfg = replace(cfg, train_trajectories=args.train)
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with threadpool_limits(1):
        rows = run_benchmark(cfg, out_csv=args.out / "ablation.csv", log=print)
    print(f"\n{'variant':<30}{'L2 (m)':>10}{'Hausdorff (m)':>15}{'Fourier':>10}")
    for r in rows:
        print(f"{r['variant']:<30}{r['l2_m']:>10.4f}{r['hausdorff_m']:>15.4f}{r['fourier_diff']:>10.3f}")
    for claim, ok, a, b in ordering_checks(rows):
        print(f"{'holds   ' if ok else 'violated'} {claim}: {a:.4f} vs {b:.4f}")
    print(f"total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
