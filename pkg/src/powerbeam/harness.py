"""Scenario runner: configuration, closed-loop execution, traces and regression.

A run config is a YAML mapping::

    scenario: tracking_circular      # preset name from environments.SCENARIOS
    env: {}                          # overrides of the scenario config
    duration_steps: 2000
    seed: 0                          # master seed (env + controllers)
    stride: 1                        # keep every stride-th step in the trace
    snapshot_every: 100              # 0 disables image snapshots
    debug: false                     # beaming only: append a per-step screen_hash column
    timeline: [[0, train], [1000, infer]]
    controllers:
      - name: soft
        kind: ai_two_step            # none | spgd | ai_two_step | ai_one_step | combined
        preset: soft                 # optional: soft | aggressive
        schedules: {a_sigma: 0.05, b_sigma: 0.0025, mu: 1.0, a_gamma: 0.0, b_gamma: 1.0}
        learning_rate: [0.0, 0.001]
        hyper: {gamma_s: 0.01, gamma_l: 0.001, nu: 0.9}
        spgd_gain: 1.0
        dnn_gain: 1.0
        seed: 7                      # optional, derived from the master seed otherwise
        network: {conv_channels: [4, 8, 8], kernel: 5, pool: [4, 4, 4], window: 4}
"""
from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .control import Controller, ControllerConfig, Schedules, preset
from .environments import BeamingEnv, SCENARIOS, make_env, scenario_config
from .neural import DnnSpec, DnnState, TrainingHyper, save_checkpoint
from .optics import sample_screen, write_grid

__all__ = [
    "RunConfig",
    "RunTrace",
    "load_config",
    "config_hash",
    "build_env",
    "build_controller",
    "run_scenario",
    "run_comparison",
    "read_trace_csv",
    "golden_dir",
    "verify_golden",
]

MODES = ("train", "infer")


@dataclass
class RunConfig:
    scenario: str = "quadratic"
    env: dict = field(default_factory=dict)
    duration_steps: int = 100
    seed: int = 0
    stride: int = 1
    snapshot_every: int = 100
    debug: bool = False
    timeline: list = field(default_factory=lambda: [[0, "train"]])
    controllers: list = field(default_factory=lambda: [{"name": "spgd", "kind": "spgd"}])

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.duration_steps < 1 or self.stride < 1 or self.snapshot_every < 0:
            raise ValueError("duration_steps and stride must be >= 1, snapshot_every >= 0")
        if self.duration_steps % self.stride:
            raise ValueError("duration_steps must be a multiple of stride")
        self.timeline = [[int(s), str(m)] for s, m in self.timeline]
        if not self.timeline or self.timeline[0][0] != 0:
            raise ValueError("timeline must start at step 0")
        steps = [s for s, _ in self.timeline]
        if steps != sorted(set(steps)) or steps[-1] >= self.duration_steps:
            raise ValueError("switch steps must be increasing and within the run")
        for _, m in self.timeline:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        names = [c.get("name", c.get("kind")) for c in self.controllers]
        if len(set(names)) != len(names):
            raise ValueError("controller names must be unique")
        if not self.controllers:
            raise ValueError("need at least one controller")

    def to_dict(self) -> dict:
        return asdict(self)

    def mode_at(self, step: int) -> str:
        mode = self.timeline[0][1]
        for s, m in self.timeline:
            if step >= s:
                mode = m
        return mode

    def segments(self) -> list:
        """(start, stop, mode) per timeline segment."""
        bounds = [s for s, _ in self.timeline] + [self.duration_steps]
        return [(bounds[i], bounds[i + 1], self.timeline[i][1]) for i in range(len(self.timeline))]


def load_config(path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping")
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data)


def config_hash(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def build_env(config: RunConfig, j_vac: float | None = None):
    overrides = dict(config.env)
    kind, _ = SCENARIOS[config.scenario]
    if kind in ("tracking", "beaming"):
        overrides.setdefault("seed", _seed(config.seed, 0))
    if kind == "beaming" and j_vac is not None:
        overrides["j_vac"] = j_vac
    kind, ecfg = scenario_config(config.scenario, **overrides)
    return make_env(kind, ecfg)


def build_controller(spec: dict, env, master_seed: int, index: int) -> Controller:
    spec = dict(spec)
    kind = spec.get("kind", "spgd")
    sched = Schedules(**spec.get("schedules", {}))
    base = ControllerConfig(
        kind=kind,
        schedules=sched,
        learning_rate=tuple(spec.get("learning_rate", (0.0, 1e-3))),
        hyper=TrainingHyper(**spec.get("hyper", {})),
        spgd_gain=float(spec.get("spgd_gain", 1.0)),
        dnn_gain=float(spec.get("dnn_gain", 1.0)),
        seed=int(spec.get("seed", _seed(master_seed, 1, index))),
        detector_window=int(spec.get("detector_window", 50)),
    )
    if spec.get("preset"):
        base = preset(spec["preset"], base)
        # explicit keys still win over the preset
        if "learning_rate" in spec:
            base = replace(base, learning_rate=tuple(spec["learning_rate"]))
        if "hyper" in spec:
            base = replace(base, hyper=TrainingHyper(**spec["hyper"]))
        if "mu" in spec.get("schedules", {}):
            base = replace(base, schedules=sched)
    dnn = None
    if kind in ("ai_two_step", "ai_one_step", "combined"):
        net = dict(spec.get("network", {}))
        init_seed = int(net.pop("init_seed", _seed(master_seed, 2, index)))
        zero = bool(net.pop("zero_init", False))
        n_aux = 2 * env.K if kind == "combined" else None
        dspec = DnnSpec(image_shape=tuple(env.image_shape), K=env.K, n_aux_controls=n_aux, **net)
        dnn = DnnState.create(dspec, seed=init_seed, zero=zero)
    return Controller(base, env.K, dnn)


@dataclass
class RunTrace:
    name: str
    columns: list
    rows: np.ndarray  # numeric columns, mode stored as 1.0 (train) / 0.0 (infer)
    summary: dict
    csv_path: Path | None = None
    detector_trip: int | None = None


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, columns, rows):
    lines = [",".join(columns)]
    for r in rows:
        vals = [_fmt(v) for v in r]
        vals[5] = "train" if r[5] else "infer"
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")


def read_trace_csv(path) -> tuple[list, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split(",")
    data = []
    for ln in lines[1:]:
        parts = ln.split(",")
        parts[5] = "1" if parts[5] == "train" else "0"
        data.append([float(p) for p in parts])
    return cols, np.array(data)


def _segment_summary(config: RunConfig, rows: np.ndarray, steps: np.ndarray) -> list:
    out = []
    for a, b, mode in config.segments():
        sel = (steps >= a) & (steps < b)
        out.append({"start": a, "stop": b, "mode": mode,
                    "mean_J": float(np.mean(rows[sel, 1])) if sel.any() else None,
                    "records": int(sel.sum())})
    return out


def run_scenario(config: RunConfig, index: int = 0, out_dir=None, env=None, j_vac=None,
                 progress=None, checkpoint: bool = False) -> RunTrace:
    """Run one controller of ``config`` in closed loop.

    Every controller of a comparison builds its own environment from the same
    master seed, so turbulence and trajectories are identical across runs.
    """
    spec = config.controllers[index]
    name = spec.get("name", spec.get("kind"))
    env = build_env(config, j_vac) if env is None else env
    ctl = build_controller(spec, env, config.seed, index)
    K = env.K
    columns = ["t", "J", "dJ", "sigma", "gamma", "mode"] + [f"u_{k}" for k in range(K)]
    debug = config.debug and isinstance(env, BeamingEnv)
    if debug:
        columns.append("screen_hash")
    rows, steps = [], []
    out = Path(out_dir) if out_dir is not None else None
    snap_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.snapshot_every:
            snap_dir = out / "snapshots" / name
            snap_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(env, BeamingEnv):
        extent = env.sensor.side
    elif hasattr(env, "params"):
        extent = 2 * env.params.half_extent
    else:
        extent = 1.0
    for step in range(config.duration_steps):
        training = config.mode_at(step) == "train"
        if snap_dir is not None and step % config.snapshot_every == 0:
            img = _peek_image(env, ctl)
            write_grid(snap_dir / f"step_{step:07d}.grid", np.sqrt(np.maximum(img, 0.0)), extent)
        tag = [_screen_hash(env)] if debug else []
        rec = ctl.step(env, training)
        if step % config.stride == 0:
            rows.append([rec.t, rec.J, rec.dJ, rec.sigma, rec.gamma, 1.0 if rec.training else 0.0, *rec.u, *tag])
            steps.append(step)
        if progress is not None:
            progress(name, step, rec)
    rows = np.array(rows, dtype=float)
    steps = np.array(steps)
    summary = {"name": name, "kind": ctl.kind, "segments": _segment_summary(config, rows, steps),
               "mean_J": float(rows[:, 1].mean()), "detector_trip": ctl.detector.trip_step,
               "weight_updates": ctl.updates}
    trace = RunTrace(name, columns, rows, summary, detector_trip=ctl.detector.trip_step)
    if out is not None:
        trace.csv_path = out / f"{name}.csv"
        _write_csv(trace.csv_path, columns, rows)
        if checkpoint and ctl.dnn is not None:
            save_checkpoint(out / f"{name}.dnn", ctl.dnn)
    return trace


def _screen_hash(env) -> float:
    """CRC32 of every screen sample the beam meets at the current clock."""
    crc = 0
    for scr in env.screens:
        crc = zlib.crc32(np.ascontiguousarray(sample_screen(scr, env.t, env.wind)).tobytes(), crc)
    return float(crc)


def _peek_image(env, ctl):
    """Sensor image for the current control without advancing the clock."""
    u = ctl.w + ctl.v if ctl.kind == "combined" else (ctl.w if ctl.kind == "ai_one_step" else ctl.u)
    if isinstance(env, BeamingEnv):
        return env.sensor.crop(env.target_field(u).intensity())
    if hasattr(env, "params"):
        from .metrics import tracking_intensity

        return tracking_intensity(env.t, u, env.params)
    return np.full((1, 1), 0.0)


def _stamp(config: RunConfig, env, traces) -> dict:
    jv = env.metric.j_vac if isinstance(env, BeamingEnv) else None
    return {
        "config_hash": config_hash(config),
        "version": __version__,
        "master_seed": config.seed,
        "env_seed": getattr(getattr(env, "config", None), "seed", None),
        "controller_seeds": [
            int(c.get("seed", _seed(config.seed, 1, i))) for i, c in enumerate(config.controllers)
        ],
        "j_vac": jv,
        "image_norm": env.image_norm if isinstance(env, BeamingEnv) else None,
        "config": config.to_dict(),
        "summaries": [t.summary for t in traces],
    }


def run_comparison(config: RunConfig, out_dir=None, progress=None, checkpoint=False) -> list:
    """One trace per controller on identical environment realisations, plus a summary."""
    probe = build_env(config)
    j_vac = probe.metric.j_vac if isinstance(probe, BeamingEnv) else None
    traces = []
    for i in range(len(config.controllers)):
        env = probe if i == 0 else build_env(config, j_vac)
        traces.append(run_scenario(config, i, out_dir, env=env, progress=progress, checkpoint=checkpoint))
    if out_dir is not None:
        out = Path(out_dir)
        stamp = _stamp(config, probe, traces)
        (out / "stamp.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")
        table = {t.name: {s["mode"] + f"@{s['start']}": s["mean_J"] for s in t.summary["segments"]}
                 for t in traces}
        (out / "summary.json").write_text(json.dumps(
            {"config_hash": stamp["config_hash"], "table": table}, indent=2, sort_keys=True) + "\n")
    return traces


# ------------------------------------------------------------------ goldens


def golden_dir() -> Path:
    return Path(__file__).parent / "golden"


GOLDEN = ("tracking", "beaming_periodic", "quadratic")


def verify_golden(tmp_dir, regenerate: bool = False) -> dict:
    """Replay each golden config and compare the CSVs byte for byte."""
    results = {}
    tmp = Path(tmp_dir)
    for name in GOLDEN:
        cfg = load_config(golden_dir() / f"{name}.yaml")
        run_dir = tmp / name
        traces = run_comparison(cfg, run_dir)
        produced = traces[0].csv_path.read_bytes()
        ref = golden_dir() / f"{name}.csv"
        if regenerate:
            ref.write_bytes(produced)
        results[name] = ref.exists() and ref.read_bytes() == produced
    return results
