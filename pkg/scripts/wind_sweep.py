"""Training-phase <J> of SPGD and the soft AI controller against wind speed.

Each (wind, seed) pair is one comparison run on shared screens; the script
prints per-seed values and the pooled mean per wind speed.

    python3 scripts/wind_sweep.py --winds 1 2 4 6 --seeds 0 1 2 --steps 3000
"""
import argparse

import numpy as np

from powerbeam.harness import RunConfig, run_comparison

SCHED = {"a_sigma": 0.2, "b_sigma": 0.01, "mu": 1.0, "a_gamma": 6.0, "b_gamma": 0.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--winds", type=float, nargs="+", default=[1.0, 2.0, 4.0, 6.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--cn2", type=float, default=2e-15)
    ap.add_argument("--scenario", default="beaming_periodic")
    args = ap.parse_args()

    for wind in args.winds:
        per_seed = []
        for seed in args.seeds:
            cfg = RunConfig(args.scenario, env={"wind_speed": wind, "cn2": args.cn2},
                            duration_steps=args.steps, seed=seed, snapshot_every=0,
                            controllers=[{"name": "spgd", "kind": "spgd", "schedules": SCHED},
                                         {"name": "soft", "kind": "ai_two_step", "preset": "soft",
                                          "schedules": SCHED, "network": {"pool": [2, 2, 2]}}])
            spgd, soft = run_comparison(cfg)
            per_seed.append((spgd.rows[:, 1].mean(), soft.rows[:, 1].mean()))
            print(f"wind {wind:5.2f} seed {seed}: SPGD {per_seed[-1][0]:.4f}  AI {per_seed[-1][1]:.4f}")
        s, a = np.mean(per_seed, axis=0)
        print(f"wind {wind:5.2f} pooled ({len(per_seed)} seeds): SPGD {s:.4f}  AI {a:.4f}  AI/SPGD {a / s:.3f}")


if __name__ == "__main__":
    main()
