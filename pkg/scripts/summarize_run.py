"""Print per-segment statistics of every trace in a run directory.

Segments follow the run timeline recorded in stamp.json; the CSV ``mode``
column instead tells whether a controller actually trained at that step.

    python3 scripts/summarize_run.py runs/out
"""
import csv
import json
import sys
from pathlib import Path

import numpy as np


def main(run_dir):
    run_dir = Path(run_dir)
    stamp = json.loads((run_dir / "stamp.json").read_text())
    for s in stamp["summaries"]:
        with open(run_dir / f"{s['name']}.csv") as fh:
            J = np.array([float(r["J"]) for r in csv.DictReader(fh)])
        parts = []
        for seg in s["segments"]:
            tail = J[seg["start"]:seg["stop"]]
            tail = tail[-max(1, len(tail) // 5):]
            parts.append(f"{seg['mode']}[{seg['start']}:{seg['stop']}] mean {seg['mean_J']:.4f} last20% {tail.mean():.4f}")
        print(f"{s['name']}: " + "; ".join(parts) + f"; detector trip {s['detector_trip']}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/out")
