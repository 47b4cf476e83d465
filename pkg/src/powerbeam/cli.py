"""Command line entry point: ``powerbeam {run,compare,jvac,calibrate,verify}``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile


def _set_threads(n: int) -> None:
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="powerbeam", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--preset", help="scenario preset (used when no --config is given)")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("--duration-steps", type=int, help="override the run length")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")

    common(sub.add_parser("run", help="run the first controller of a config"))
    common(sub.add_parser("compare", help="run every controller on shared seeds"))
    sp = sub.add_parser("jvac", help="compute the vacuum normalisation of a beaming scenario")
    common(sp)
    sp = sub.add_parser("calibrate", help="tune a_sigma so the median |dJ| is 1%% of (1 - J)")
    common(sp)
    sp.add_argument("--iterations", type=int, default=100)
    sp = sub.add_parser("verify", help="replay golden configs and compare CSVs byte for byte")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.add_argument("--regenerate", action="store_true", help="rewrite the golden CSVs")
    return p


def _load(args):
    from .harness import RunConfig, load_config

    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = RunConfig(scenario=args.preset)
    else:
        raise SystemExit("need --config or --preset")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.duration_steps is not None:
        cfg.duration_steps = args.duration_steps
        cfg.timeline = [e for e in cfg.timeline if e[0] < cfg.duration_steps]
    cfg.__post_init__()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    _set_threads(args.threads)
    from . import harness

    if args.cmd == "verify":
        out = args.out or tempfile.mkdtemp(prefix="powerbeam-verify-")
        res = harness.verify_golden(out, regenerate=args.regenerate)
        for name, ok in res.items():
            print(f"{name}: {'PASS' if ok else 'FAIL'}")
        return 0 if all(res.values()) else 1

    cfg = _load(args)
    if args.cmd in ("run", "compare"):
        if args.cmd == "run":
            cfg.controllers = cfg.controllers[:1]
        traces = harness.run_comparison(cfg, args.out)
        for t in traces:
            segs = ", ".join(f"{s['mode']}[{s['start']}:{s['stop']}] <J>={s['mean_J']:.4f}" for s in t.summary["segments"])
            print(f"{t.name}: {segs}")
        return 0

    env = harness.build_env(cfg)
    if args.cmd == "jvac":
        from .environments import BeamingEnv, vacuum_j

        if not isinstance(env, BeamingEnv):
            raise SystemExit("jvac only applies to beaming scenarios")
        res = vacuum_j(env.config)
        print(json.dumps({"j_vac": res.value, "iterations": res.iterations, "evaluations": res.evaluations}))
        return 0
    if args.cmd == "calibrate":
        from .control import calibrate_sigma

        a = calibrate_sigma(lambda: harness.build_env(cfg), env.K, seed=cfg.seed, n_iter=args.iterations)
        print(json.dumps({"a_sigma": a, "b_sigma": a / 20}))
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
