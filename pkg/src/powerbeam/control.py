"""Controllers: two-step SPGD, the network controller trained by perturbation
(two-step and one-step variants), and combined SPGD + network control.

Every controller talks to an environment through ``env.measure(u, fraction)``,
which returns ``(image, J)`` for the control ``u`` at the current clock and then
advances the clock by ``fraction`` of a time step.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .neural import DnnState, Observation, TrainingHyper, update_weights

__all__ = [
    "Schedules",
    "draw_perturbation",
    "ControllerConfig",
    "StepRecord",
    "InstabilityDetector",
    "Controller",
    "PRESETS",
    "preset",
    "calibrate_sigma",
    "MeasurementCounter",
]

KINDS = ("none", "spgd", "ai_two_step", "ai_one_step", "combined")


@dataclass(frozen=True)
class Schedules:
    """sigma_t = a_sigma (1 - J)^mu + b_sigma,  gamma_t = a_gamma (1 - J) + b_gamma.

    The gain defaults are tuned on the quadratic benchmark; ``b_gamma`` must
    stay positive there because sigma_t^2 (and with it the step) shrinks
    near the optimum.
    """

    a_sigma: float = 0.1
    b_sigma: float = 0.005
    mu: float = 1.0
    a_gamma: float = 30.0
    b_gamma: float = 30.0

    def __post_init__(self):
        if min(self.a_sigma, self.b_sigma, self.mu, self.a_gamma, self.b_gamma) < 0:
            raise ValueError("schedule parameters must be non-negative")

    def sigma(self, J: float) -> float:
        return self.a_sigma * max(1.0 - J, 0.0) ** self.mu + self.b_sigma

    def gamma(self, J: float) -> float:
        return self.a_gamma * max(1.0 - J, 0.0) + self.b_gamma


def draw_perturbation(rng: np.random.Generator, sigma: float, K: int) -> np.ndarray:
    """Independent zero-mean uniform components with variance sigma**2."""
    h = np.sqrt(3.0) * sigma
    return rng.uniform(-h, h, K)


class MeasurementCounter:
    """Wraps an environment and counts ``measure`` calls."""

    def __init__(self, env):
        self.env = env
        self.count = 0

    def __getattr__(self, name):
        return getattr(self.env, name)

    def measure(self, u, fraction=1.0):
        self.count += 1
        return self.env.measure(u, fraction)


@dataclass(frozen=True)
class ControllerConfig:
    """Controller settings.

    ``learning_rate`` is the (a, b) pair of the gain schedule used for the
    network update; ``schedules`` drives perturbations and the SPGD gain.
    """

    kind: str = "spgd"
    schedules: Schedules = Schedules()
    learning_rate: tuple = (0.0, 1e-3)
    hyper: TrainingHyper = TrainingHyper()
    spgd_gain: float = 1.0
    dnn_gain: float = 1.0
    seed: int = 0
    detector_window: int = 50

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}")

    def lr(self, J: float) -> float:
        a, b = self.learning_rate
        return a * max(1.0 - J, 0.0) + b


@dataclass
class StepRecord:
    t: float
    J: float
    dJ: float
    sigma: float
    gamma: float
    training: bool
    u: np.ndarray


class InstabilityDetector:
    """Flags 'saw'-type control: per-channel window std above ``ratio`` times the
    magnitude of the window mean for ``consecutive`` windows in a row.

    Observational only. Comparing against mean(|u|) instead could never fire,
    since std / mean(|u|) is at most sqrt(window - 1).
    """

    def __init__(self, window: int = 50, ratio: float = 10.0, consecutive: int = 5):
        self.window, self.ratio, self.consecutive = window, ratio, consecutive
        self._buf = []
        self._streak = 0
        self.tripped = False
        self.trip_step = None
        self._n = 0

    def push(self, u: np.ndarray) -> bool:
        self._buf.append(np.array(u, dtype=float))
        self._n += 1
        if len(self._buf) < self.window:
            return self.tripped
        arr = np.array(self._buf)
        self._buf = []
        bad = np.any(arr.std(axis=0) > self.ratio * np.abs(arr.mean(axis=0)))
        self._streak = self._streak + 1 if bad else 0
        if self._streak >= self.consecutive and not self.tripped:
            self.tripped = True
            self.trip_step = self._n
        return self.tripped


class Controller:
    """A single controller instance bound to ``K`` channels.

    Parameters
    ----------
    config : ControllerConfig
    K : int
        Number of control channels.
    dnn : DnnState, optional
        Required for network-based kinds. Shared by the training and
        inference replicas.
    """

    def __init__(self, config: ControllerConfig, K: int, dnn: DnnState | None = None):
        self.config = config
        self.kind = config.kind
        self.K = K
        self.rng = np.random.default_rng(config.seed)
        self.dnn = dnn
        if self.kind in ("ai_two_step", "ai_one_step", "combined"):
            if dnn is None:
                raise ValueError(f"{self.kind} needs a network")
            aux = 2 * K if self.kind == "combined" else K
            if dnn.spec.K != K or dnn.spec.aux_size != 1 + aux:
                raise ValueError("network spec does not match controller channels")
        self.u = np.zeros(K)
        self.w = np.zeros(K)
        self.v = np.zeros(K)
        self._v_raw = np.zeros(K)
        self.buffer: list = []
        self._weights: list = []
        self._h0 = None
        self._prev_out = None
        self.detector = InstabilityDetector(config.detector_window)
        self.updates = 0
        # one-step bootstrap (I_0 = 0, J_0 = 0)
        self._obs = None
        self._J = 0.0
        self._t = 0

    # ------------------------------------------------------------ helpers

    def _push(self, obs: Observation, weight: np.ndarray, prev_out: np.ndarray):
        if not self.buffer:
            self._h0 = self.dnn.h.copy()
            self._prev_out = np.array(prev_out, dtype=float)
        self.buffer.append(obs)
        self._weights.append(weight)
        if len(self.buffer) == self.dnn.spec.window:
            update_weights(self.dnn, self.buffer, np.array(self._weights), self._prev_out,
                           self.config.hyper, h0=self._h0)
            self.updates += 1
            self.buffer, self._weights = [], []

    def _infer(self, obs: Observation) -> np.ndarray:
        h = self.dnn.h.copy()
        out = self.dnn.step(obs)
        if not np.all(np.isfinite(out)):
            self.dnn.h = h
            raise FloatingPointError("network produced non-finite controls")
        return out

    def _flush(self):
        self.buffer, self._weights = [], []

    # --------------------------------------------------------------- step

    def step(self, env, training: bool = True) -> StepRecord:
        if not training:
            self._flush()
        t = env.t
        fn = {
            "none": self._step_none,
            "spgd": self._step_spgd,
            "ai_two_step": self._step_two,
            "ai_one_step": self._step_one,
            "combined": self._step_combined,
        }[self.kind]
        rec = fn(env, training)
        rec.t = t
        self.detector.push(rec.u)
        self._t += 1
        return rec

    def _step_none(self, env, training):
        _, J = env.measure(self.u, 1.0)
        return StepRecord(0.0, J, 0.0, 0.0, 0.0, False, self.u.copy())

    def _step_spgd(self, env, training):
        s = self.config.schedules
        u = self.u
        _, J = env.measure(u, 0.5)
        sigma = s.sigma(J)
        du = draw_perturbation(self.rng, sigma, self.K)
        _, Jp = env.measure(u + du, 0.5)
        dJ = Jp - J
        gamma = s.gamma(J)
        self.u = u + gamma * dJ * du
        return StepRecord(0.0, J, dJ, sigma, gamma, True, u.copy())

    def _step_two(self, env, training):
        s = self.config.schedules
        u = self.u
        if training:
            img, J = env.measure(u, 0.5)
            sigma = s.sigma(J)
            du = draw_perturbation(self.rng, sigma, self.K)
            _, Jp = env.measure(u + du, 0.5)
            dJ = Jp - J
            gamma = self.config.lr(J)
            obs = Observation(img, J, u)
            self._push(obs, gamma / s.a_sigma * dJ * du, u)
        else:
            img, J = env.measure(u, 1.0)
            sigma = gamma = dJ = 0.0
            obs = Observation(img, J, u)
        self.u = self._infer(obs)
        return StepRecord(0.0, J, dJ, sigma, gamma, training, u.copy())

    def _step_one(self, env, training):
        s = self.config.schedules
        if self._obs is None:
            self._obs = Observation(np.zeros(self.dnn.spec.image_shape), 0.0, np.zeros(self.K))
        u_prev = self.u  # DNN output u_t
        u_next = self._infer(self._obs)
        sigma = s.sigma(self._J) if training else 0.0
        du = draw_perturbation(self.rng, sigma, self.K) if training else np.zeros(self.K)
        w = u_next + du
        img, J = env.measure(w, 1.0)
        dJ = J - self._J
        obs = Observation(img, J, w)
        gamma = 0.0
        if training and self._t > 0:
            gamma = self.config.lr(J)
            self._push(obs, gamma / s.a_sigma * dJ * (w - u_prev), u_next)
        self.u, self.w = u_next, w
        self._obs, self._J = obs, J
        return StepRecord(0.0, J, dJ, sigma, gamma, training, w.copy())

    def _step_combined(self, env, training):
        s, c = self.config.schedules, self.config
        u = self.w + self.v
        if training:
            img, J = env.measure(u, 0.5)
            sigma = s.sigma(J)
            du = draw_perturbation(self.rng, sigma, self.K)
            _, Jp = env.measure(u + du, 0.5)
            dJ = Jp - J
            gamma = s.gamma(J)
            w_next = self.w + c.spgd_gain * (gamma * dJ * du)
            obs = Observation(img, J, np.concatenate([self.v, w_next]))
            self._push(obs, c.lr(J) / s.a_sigma * dJ * du, self._v_raw)
        else:
            img, J = env.measure(u, 1.0)
            sigma = gamma = dJ = 0.0
            w_next = self.w
            obs = Observation(img, J, np.concatenate([self.v, w_next]))
        self._v_raw = self._infer(obs)
        self.v = c.dnn_gain * self._v_raw
        self.w = w_next
        self.u = self.w + self.v
        return StepRecord(0.0, J, dJ, sigma, gamma, training, u.copy())


# ------------------------------------------------------------------ presets

PRESETS = {
    # constant learning rate 1e-3, mu = 1, both regularisers
    "soft": dict(learning_rate=(0.0, 1e-3), mu=1.0, hyper=TrainingHyper(gamma_s=1e-2, gamma_l=1e-3, nu=0.9)),
    # learning rate 1e-2, mu = 0.5, smoothness regulariser only
    "aggressive": dict(learning_rate=(0.0, 1e-2), mu=0.5, hyper=TrainingHyper(gamma_s=1e-2, gamma_l=0.0, nu=0.9)),
}


def preset(name: str, base: ControllerConfig) -> ControllerConfig:
    try:
        p = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, learning_rate=p["learning_rate"], hyper=p["hyper"],
                   schedules=replace(base.schedules, mu=p["mu"]))


def calibrate_sigma(make_env, K: int, seed: int = 0, n_iter: int = 100, target: float = 0.01,
                    lo: float = 1e-4, hi: float = 10.0, steps: int = 24, u0=None) -> float:
    """Find a_sigma so that median |dJ| / (1 - J) over ``n_iter`` probes is ``target``.

    Probes are two-step perturbations around ``u0`` (zeros by default) with
    a fresh environment from ``make_env()`` for every candidate, so the
    answer is deterministic.
    """
    u0 = np.zeros(K) if u0 is None else np.asarray(u0, dtype=float)

    def ratio(a):
        env = make_env()
        rng = np.random.default_rng(seed)
        vals = []
        for _ in range(n_iter):
            _, J = env.measure(u0, 0.5)
            du = draw_perturbation(rng, a * max(1 - J, 0.0), K)
            _, Jp = env.measure(u0 + du, 0.5)
            vals.append(abs(Jp - J) / max(1 - J, 1e-12))
        return float(np.median(vals))

    la, lb = np.log(lo), np.log(hi)
    for _ in range(steps):
        mid = 0.5 * (la + lb)
        if ratio(np.exp(mid)) < target:
            la = mid
        else:
            lb = mid
    return float(np.exp(0.5 * (la + lb)))
