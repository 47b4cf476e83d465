"""Performance metrics: smooth Strehl ratio on a PVA sensor, its vacuum
normalisation, and the Gaussian-spot tracking metric used by the toy task.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

__all__ = [
    "ConfigurationError",
    "JvacConvergenceError",
    "PvaSensor",
    "MetricSpec",
    "weighted_power",
    "smooth_strehl",
    "JvacResult",
    "compute_j_vac",
    "CircularTrajectory",
    "RandomWalkTrajectory",
    "TrackingParams",
    "tracking_intensity",
    "tracking_metric",
    "tracking_closed_form",
]


class ConfigurationError(RuntimeError):
    pass


class JvacConvergenceError(RuntimeError):
    def __init__(self, msg, best):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class PvaSensor:
    """Square PVA of side ``side`` centred on axis, read out on the simulation grid.

    ``out_res`` is the image size handed to controllers; it must divide the
    native pixel count. Integration for metrics always uses the native grid.
    """

    side: float
    n: int
    pitch: float
    out_res: int | None = None

    def __post_init__(self):
        m = self.native_res
        if m < 1 or m > self.n:
            raise ConfigurationError("PVA does not fit inside the simulation grid")
        if abs(m * self.pitch - self.side) > 1e-6 * self.side:
            raise ConfigurationError("PVA side is not a whole number of grid pixels")
        if m % self.out_resolution:
            raise ConfigurationError("controller resolution must divide the native PVA resolution")

    @property
    def native_res(self) -> int:
        return int(round(self.side / self.pitch))

    @property
    def out_resolution(self) -> int:
        return self.native_res if self.out_res is None else self.out_res

    @property
    def slice(self) -> slice:
        m = self.native_res
        lo = self.n // 2 - m // 2
        return slice(lo, lo + m)

    def coords(self) -> np.ndarray:
        m = self.native_res
        return (np.arange(m) - m // 2) * self.pitch

    def crop(self, intensity: np.ndarray) -> np.ndarray:
        s = self.slice
        return intensity[s, s]

    def downsample(self, img: np.ndarray) -> np.ndarray:
        """Block mean to the controller resolution; preserves integrated intensity."""
        b = self.native_res // self.out_resolution
        if b == 1:
            return img
        r = self.out_resolution
        return img.reshape(r, b, r, b).mean(axis=(1, 3))

    def weights(self, beta: float) -> np.ndarray:
        c = self.coords()
        return np.exp(-(c[:, None] ** 2 + c[None, :] ** 2) / beta**2)


@dataclass
class MetricSpec:
    kind: str = "smooth_strehl"
    beta: float = 0.01
    beta1: float = 0.4
    beta2: float = 1.0
    j_vac: float | None = None

    def __post_init__(self):
        if self.kind not in ("smooth_strehl", "tracking"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if min(self.beta, self.beta1, self.beta2) <= 0:
            raise ValueError("metric widths must be positive")
        if self.j_vac is not None and not self.j_vac > 0:
            raise ValueError("j_vac must be positive")


def weighted_power(intensity: np.ndarray, sensor: PvaSensor, beta: float) -> float:
    """Un-normalised Gaussian-weighted power over the PVA (native pixels)."""
    return float(np.sum(intensity * sensor.weights(beta)) * sensor.pitch**2)


def smooth_strehl(intensity: np.ndarray, spec: MetricSpec, sensor: PvaSensor) -> float:
    if spec.j_vac is None:
        raise ConfigurationError("J_vac has not been computed for this scenario")
    return weighted_power(intensity, sensor, spec.beta) / spec.j_vac


@dataclass
class JvacResult:
    value: float
    controls: np.ndarray
    iterations: int
    evaluations: int


def compute_j_vac(
    objective: Callable[[np.ndarray], float],
    u0: np.ndarray,
    seed: int = 0,
    sigma: float = 0.05,
    gain: float = 2.0,
    tol: float = 1e-5,
    patience: int = 500,
    max_iter: int = 20000,
    polish_sweeps: int = 3,
    polish_span: float = 0.5,
) -> JvacResult:
    """Maximise ``objective`` (vacuum weighted power) over controls.

    SPGD from ``u0`` until the best value improves by less than ``tol``
    (relative) over ``patience`` iterations, then coordinate-wise bounded
    Brent polishing. Controls are in the caller's normalised units.
    """
    rng = np.random.default_rng(seed)
    u = np.array(u0, dtype=float)
    n_eval = 0

    def f(x):
        nonlocal n_eval
        n_eval += 1
        return objective(x)

    j = f(u)
    scale = j if j > 0 else 1.0
    best, best_u = j, u.copy()
    history = [best]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        du = rng.uniform(-np.sqrt(3) * sigma, np.sqrt(3) * sigma, u.size)
        jp, jm = f(u + du), f(u - du)
        u = u + gain * (jp - jm) / (2 * scale * sigma**2) * du
        j = f(u)
        if j > best:
            best, best_u = j, u.copy()
        history.append(best)
        if it >= patience and history[-1] - history[-1 - patience] < tol * abs(history[-1]):
            converged = True
            break
    if not converged:
        raise JvacConvergenceError(f"SPGD did not converge in {max_iter} iterations", best)

    u = best_u
    for _ in range(polish_sweeps):
        start = best
        for k in range(u.size):
            x0 = u[k]

            def neg(x, k=k):
                v = u.copy()
                v[k] = x
                return -f(v)

            res = minimize_scalar(neg, bounds=(x0 - polish_span, x0 + polish_span), method="bounded",
                                  options={"xatol": 1e-7})
            if -res.fun > best:
                best = -res.fun
                u[k] = res.x
        if best - start < 1e-10 * abs(best):
            break
    return JvacResult(float(best), u, it, n_eval)


# ----------------------------------------------------------------- tracking


@dataclass(frozen=True)
class CircularTrajectory:
    omega: float = 2 * np.pi / 300.0

    def position(self, t: float) -> np.ndarray:
        return np.array([np.sin(self.omega * t), np.cos(self.omega * t)])


class RandomWalkTrajectory:
    """Independent per-axis AR(1) path sampled every ``dt``; linear in between."""

    def __init__(self, seed: int = 0, dt: float = 0.1, corr: float = 0.995, std: float = 1.0):
        self.seed, self.dt, self.corr, self.std = seed, dt, corr, std
        self._rng = np.random.default_rng(seed)
        self._pts = [self._rng.standard_normal(2) * std]

    def _sample(self, i: int) -> np.ndarray:
        innov = self.std * np.sqrt(1 - self.corr**2)
        while len(self._pts) <= i:
            self._pts.append(self.corr * self._pts[-1] + innov * self._rng.standard_normal(2))
        return self._pts[i]

    def position(self, t: float) -> np.ndarray:
        s = t / self.dt
        i = int(np.floor(s))
        f = s - i
        a = self._sample(i)
        if f == 0:
            return a.copy()
        return (1 - f) * a + f * self._sample(i + 1)


@dataclass(frozen=True)
class TrackingParams:
    n: int = 256
    half_extent: float = 5.0
    beta1: float = 0.4
    beta2: float = 1.0
    trajectory: object = CircularTrajectory()

    @property
    def pitch(self) -> float:
        return 2 * self.half_extent / self.n

    def coords(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.pitch


def tracking_intensity(t: float, u, params: TrackingParams) -> np.ndarray:
    """Unit-peak Gaussian spot of width beta1 at rho(t) - u."""
    cx, cy = params.trajectory.position(t) - np.asarray(u, dtype=float)
    c = params.coords()
    gx = np.exp(-((c - cx) ** 2) / params.beta1**2)
    gy = np.exp(-((c - cy) ** 2) / params.beta1**2)
    return gy[:, None] * gx[None, :]


def tracking_metric(image: np.ndarray, params: TrackingParams) -> float:
    c = params.coords()
    w = np.exp(-(c**2) / params.beta2**2)
    pref = (1 / params.beta1**2 + 1 / params.beta2**2) / np.pi
    return float(pref * (w @ image @ w) * params.pitch**2)


def tracking_closed_form(offset, params: TrackingParams) -> float:
    a2 = float(np.sum(np.asarray(offset, dtype=float) ** 2))
    return float(np.exp(-a2 / (params.beta1**2 + params.beta2**2)))
