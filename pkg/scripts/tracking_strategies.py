"""Soft vs aggressive learning on the tracking task.

Runs both presets on shared seeds, disables training at the midpoint and
reports the post-disable mean J and the per-axis correlation between the
control and the target trajectory.

    python3 scripts/tracking_strategies.py --steps 12000 --out runs/tracking
"""
import argparse

import numpy as np

from powerbeam.control import calibrate_sigma
from powerbeam.environments import TrackingEnv
from powerbeam.harness import RunConfig, run_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=12000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trajectory", choices=["circular", "random"], default="circular")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    a_sigma = calibrate_sigma(lambda: TrackingEnv(), 2, seed=args.seed)
    half = args.steps // 2
    cfg = RunConfig(
        f"tracking_{args.trajectory}", duration_steps=args.steps, seed=args.seed, snapshot_every=0,
        timeline=[[0, "train"], [half, "infer"]],
        controllers=[{"name": p, "kind": "ai_two_step", "preset": p,
                      "schedules": {"a_sigma": a_sigma, "b_sigma": a_sigma / 20}} for p in ("soft", "aggressive")],
    )
    print(f"calibrated a_sigma = {a_sigma:.5f}")
    env = TrackingEnv()
    for tr in run_comparison(cfg, args.out):
        post = tr.rows[half:]
        rho = np.array([env.target(t) for t in post[:, 0]])
        corr = [np.corrcoef(post[:, 6 + k], rho[:, k])[0, 1] if post[:, 6 + k].std() > 0 else 0.0 for k in range(2)]
        print(f"{tr.name:>10}: train <J> {tr.rows[:half, 1].mean():.3f}  post-disable <J> {post[:, 1].mean():.3f}"
              f"  corr x {corr[0]:+.2f} y {corr[1]:+.2f}  detector trip {tr.detector_trip}")


if __name__ == "__main__":
    main()
