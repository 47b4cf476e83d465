"""Closed-loop environments exposing ``measure(u, fraction) -> (image, J)``.

* :class:`TrackingEnv`: a Gaussian spot moving along a trajectory; the control
  shifts the spot back toward the origin.
* :class:`BeamingEnv`: fiber-array beam through turbulence onto a PVA.
* :class:`QuadraticEnv`: static ``J = exp(-|u - u*|^2)`` benchmark.

Beaming controls are normalised so controllers work in phase radians:
piston ``c = u * lambda / (2 pi)`` and tip/tilt ``s = u * lambda / (2 pi) / (d / 2)``
(a unit tip is one radian of phase at the subaperture edge). In Zernike
control space the coefficients are phase radians on the array disc.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from functools import lru_cache

import numpy as np

from . import optics
from .fiber_array import Aperture, ControlVector, build_r_matrix, hexagonal_array
from .metrics import (
    CircularTrajectory,
    MetricSpec,
    PvaSensor,
    RandomWalkTrajectory,
    TrackingParams,
    compute_j_vac,
    tracking_intensity,
    tracking_metric,
    weighted_power,
)

__all__ = [
    "TrackingConfig",
    "TrackingEnv",
    "BeamingConfig",
    "BeamingEnv",
    "QuadraticEnv",
    "SCENARIOS",
    "scenario_config",
    "make_env",
    "vacuum_j",
]

_FRACTIONS = (0.5, 1.0)


class _Clock:
    dt: float
    t: float

    def advance(self, fraction: float = 1.0) -> None:
        if fraction not in _FRACTIONS:
            raise ValueError("fraction must be 1/2 or 1")
        # integer half-step counter keeps the clock exact
        self._half += int(round(2 * fraction))
        self.t = self._half * self.dt / 2


# ------------------------------------------------------------------ tracking


@dataclass(frozen=True)
class TrackingConfig:
    trajectory: str = "circular"  # or "random"
    n: int = 256
    half_extent: float = 5.0
    beta1: float = 0.4
    beta2: float = 1.0
    dt: float = 0.1
    omega: float = 2 * np.pi / 300.0
    seed: int = 0
    walk_corr: float = 0.995
    walk_std: float = 1.0

    def __post_init__(self):
        if self.trajectory not in ("circular", "random"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")


class TrackingEnv(_Clock):
    K = 2

    def __init__(self, config: TrackingConfig = TrackingConfig()):
        self.config = config
        if config.trajectory == "circular":
            traj = CircularTrajectory(config.omega)
        else:
            traj = RandomWalkTrajectory(config.seed, config.dt, config.walk_corr, config.walk_std)
        self.params = TrackingParams(config.n, config.half_extent, config.beta1, config.beta2, traj)
        self.dt = config.dt
        self.t = 0.0
        self._half = 0

    @property
    def image_shape(self):
        return (self.config.n, self.config.n)

    def target(self, t: float | None = None) -> np.ndarray:
        return self.params.trajectory.position(self.t if t is None else t)

    def measure(self, u, fraction: float = 1.0):
        u = np.asarray(u, dtype=float)
        if u.shape != (2,):
            raise ValueError("tracking control must be a 2-vector")
        img = tracking_intensity(self.t, u, self.params)
        J = tracking_metric(img, self.params)
        self.advance(fraction)
        return img, J


# ------------------------------------------------------------------ quadratic


class QuadraticEnv(_Clock):
    """J(u) = exp(-|u - u*|^2); the image is a 1x1 array holding J."""

    def __init__(self, optimum=(1.0, -1.0), dt: float = 1.0):
        self.optimum = np.asarray(optimum, dtype=float)
        self.K = self.optimum.size
        self.dt = dt
        self.t = 0.0
        self._half = 0

    image_shape = (1, 1)

    def measure(self, u, fraction: float = 1.0):
        u = np.asarray(u, dtype=float)
        J = float(np.exp(-np.sum((u - self.optimum) ** 2)))
        self.advance(fraction)
        return np.full((1, 1), J), J


# ------------------------------------------------------------------ beaming


@dataclass(frozen=True)
class BeamingConfig:
    """Desk-scale defaults; see :data:`SCENARIOS` for the named presets."""

    n_sa: int = 19
    d: float = 0.06
    a0: float | None = None
    wavelength: float = 1.064e-6
    length: float = 5000.0
    n: int = 256
    extent: float = 0.8
    n_screens: int = 3
    cn2: float = 1e-15
    screen_kind: str = "periodic"
    outer_scale: float = 10.0
    inner_scale: float = 1e-3
    wind_speed: float = 2.0
    dt: float = 5e-5
    pva_side: float = 0.2
    controller_res: int = 64
    beta: float = 0.01
    control_mode: str = "piston_tiptilt"
    control_space: str = "direct"  # or "zernike"
    n_zernike: int = 4
    absorber: bool = False
    prefocus: bool = True
    seed: int = 0
    j_vac: float | None = None
    image_norm: float | None = None

    def __post_init__(self):
        if self.control_space not in ("direct", "zernike"):
            raise ValueError(f"unknown control space {self.control_space!r}")
        if self.n_screens < 0:
            raise ValueError("n_screens must be >= 0")

    def vacuum_key(self) -> tuple:
        """Fields that determine the vacuum normalisation."""
        return (self.n_sa, self.d, self.a0, self.wavelength, self.length, self.n, self.extent,
                self.pva_side, self.beta, self.absorber)


class BeamingEnv(_Clock):
    """Fiber array -> split-step turbulence -> PVA image and smooth Strehl ratio."""

    def __init__(self, config: BeamingConfig = BeamingConfig()):
        self.config = c = config
        self.geom = hexagonal_array(c.n_sa, c.d, c.a0)
        self.aperture = Aperture(self.geom, c.n, c.extent, c.wavelength)
        pitch = c.extent / c.n
        self.sensor = PvaSensor(c.pva_side, c.n, pitch, c.controller_res)
        self.absorber = optics.super_gaussian_absorber(c.n, c.n) if c.absorber else None
        self.wind = optics.WindModel(c.wind_speed, (1.0, 0.0))
        self.screens = []
        if c.n_screens and c.cn2 > 0:
            dz = c.length / c.n_screens
            for i, z in enumerate(optics.equidistant_positions(c.length, c.n_screens)):
                spec = optics.ScreenSpec(c.cn2, dz, c.wavelength, c.n, c.extent, c.screen_kind,
                                         c.outer_scale, c.inner_scale)
                seed = int(np.random.SeedSequence([c.seed, i]).generate_state(1)[0])
                self.screens.append(optics.generate_screen(spec, seed, float(z)))
        self.basis = None
        if c.control_space == "zernike":
            self.basis = build_r_matrix(self.geom, c.n_zernike, mode=c.control_mode)
        self.K = self._n_channels()
        self.dt = c.dt
        self.t = 0.0
        self._half = 0
        self._bias = None
        if c.prefocus:
            f = _focus_guess(replace(c, control_mode="piston_tiptilt"))
            self._bias = ControlVector.from_flat(self._scale_direct(f, "piston_tiptilt"), c.n_sa)
        jv = c.j_vac if c.j_vac is not None else vacuum_j(c).value
        self.metric = MetricSpec("smooth_strehl", beta=c.beta, j_vac=jv)
        self.image_norm = c.image_norm if c.image_norm is not None else _vacuum_peak(c)
        self.last_power = None

    def _n_channels(self) -> int:
        if self.basis is not None:
            return self.basis.Q
        return self.config.n_sa * (1 if self.config.control_mode == "piston" else 3)

    @property
    def image_shape(self):
        r = self.sensor.out_resolution
        return (r, r)

    # -- control mapping
    def _scale_direct(self, u, mode):
        c = self.config
        flat = np.asarray(u, dtype=float) * c.wavelength / (2 * np.pi)
        if mode == "piston_tiptilt":
            flat[c.n_sa :] /= c.d / 2
        return flat

    def to_physical(self, u) -> ControlVector:
        """Normalised controls (plus the static focus when enabled) in physical units."""
        c = self.config
        u = np.asarray(u, dtype=float)
        if u.shape != (self.K,):
            raise ValueError(f"expected {self.K} controls, got shape {u.shape}")
        if self.basis is not None:
            # phase radians (rad/m for slopes) -> metres / slopes
            flat = (u @ self.basis.R.T) * c.wavelength / (2 * np.pi)
        else:
            flat = self._scale_direct(u, c.control_mode)
        ctrl = ControlVector.from_flat(flat, c.n_sa, c.control_mode)
        if self._bias is not None:
            b = self._bias
            ctrl = ControlVector(ctrl.pistons + b.pistons, ctrl.tips + b.tips, ctrl.tilts + b.tilts, c.control_mode)
        return ctrl

    def vacuum_controls(self) -> np.ndarray:
        """Controls (in this env's units) that reach the vacuum optimum.

        Only defined for direct piston/tip-tilt control; the static focus is
        subtracted when it is applied as a bias.
        """
        c = self.config
        if self.basis is not None or c.control_mode != "piston_tiptilt":
            raise ValueError("vacuum controls are only defined for direct piston/tip-tilt control")
        u = vacuum_j(c).controls.copy()
        if c.prefocus:
            u -= _focus_guess(c)
        return u

    def target_field(self, u, t: float | None = None) -> optics.ComplexField:
        t = self.t if t is None else t
        src = self.aperture.field(self.to_physical(u))
        return optics.split_step_propagate(src, self.screens, self.wind, t, self.config.length, self.absorber)

    def measure(self, u, fraction: float = 1.0):
        f = self.target_field(u)
        inten = f.intensity()
        crop = self.sensor.crop(inten)
        J = weighted_power(crop, self.sensor, self.config.beta) / self.metric.j_vac
        self.last_power = (float(np.sum(crop)) * self.sensor.pitch**2, float(np.sum(inten)) * self.sensor.pitch**2)
        self.advance(fraction)
        return self.sensor.downsample(crop) / self.image_norm, J


def _focus_guess(config: BeamingConfig) -> np.ndarray:
    """Geometric focus at the target in normalised direct controls."""
    geom = hexagonal_array(config.n_sa, config.d, config.a0)
    rho = geom.centers
    L = config.length
    c = -(rho**2).sum(1) / (2 * L)
    tips, tilts = -rho[:, 0] / L, -rho[:, 1] / L
    scale = 2 * np.pi / config.wavelength
    if config.control_mode == "piston":
        return c * scale
    return np.concatenate([c, tips * config.d / 2, tilts * config.d / 2]) * scale


@lru_cache(maxsize=32)
def _vacuum_j_cached(key, seed):
    config = _VAC_CONFIGS[key]
    env = _raw_vacuum_env(config)

    def objective(u):
        f = env.target_field(u, 0.0)
        return weighted_power(env.sensor.crop(f.intensity()), env.sensor, config.beta)

    u0 = _focus_guess(replace(config, control_mode="piston_tiptilt"))
    return compute_j_vac(objective, u0, seed=seed)


_VAC_CONFIGS: dict = {}


def _raw_vacuum_env(config: BeamingConfig) -> "BeamingEnv":
    return BeamingEnv(replace(config, n_screens=0, cn2=0.0, j_vac=1.0, image_norm=1.0, control_space="direct",
                              control_mode="piston_tiptilt", prefocus=False))


def _vacuum_peak(config: BeamingConfig) -> float:
    """Peak pixel of the controller-resolution frame at the vacuum optimum."""
    env = _raw_vacuum_env(config)
    f = env.target_field(vacuum_j(config).controls, 0.0)
    return float(env.sensor.downsample(env.sensor.crop(f.intensity())).max())


def vacuum_j(config: BeamingConfig, seed: int = 0):
    """Vacuum optimum of the un-normalised metric (memoised per geometry/grid)."""
    key = config.vacuum_key()
    _VAC_CONFIGS.setdefault(key, config)
    return _vacuum_j_cached(key, seed)


# ------------------------------------------------------------------ presets

SCENARIOS = {
    "tracking_circular": ("tracking", dict(trajectory="circular")),
    "tracking_random": ("tracking", dict(trajectory="random")),
    "beaming_periodic": ("beaming", dict(screen_kind="periodic")),
    "beaming_infinite": ("beaming", dict(screen_kind="infinite")),
    "beaming_frozen": ("beaming", dict(screen_kind="periodic", wind_speed=0.0)),
    "paper-full": ("beaming", dict(screen_kind="infinite", n=1024, extent=0.8, n_screens=7, length=5000.0,
                                    controller_res=256, wind_speed=3.0)),
    "quadratic": ("quadratic", dict()),
}


def _coerce(cls, params: dict) -> dict:
    # YAML 1.1 reads exponent floats without a dot (1e-15) as strings
    types = {f.name: f.default for f in fields(cls)}
    out = {}
    for k, v in params.items():
        if k not in types:
            raise ValueError(f"unknown {cls.__name__} field {k!r}")
        if isinstance(v, str) and isinstance(types[k], (int, float)) and not isinstance(types[k], bool):
            v = type(types[k])(float(v)) if isinstance(types[k], float) else int(v)
        out[k] = v
    return out


def scenario_config(name: str, **overrides):
    try:
        kind, base = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    params = {**base, **overrides}
    if kind == "tracking":
        return kind, TrackingConfig(**_coerce(TrackingConfig, params))
    if kind == "beaming":
        return kind, BeamingConfig(**_coerce(BeamingConfig, params))
    return kind, dict(params)


def make_env(kind: str, config):
    if kind == "tracking":
        return TrackingEnv(config)
    if kind == "beaming":
        return BeamingEnv(config)
    if kind == "quadratic":
        return QuadraticEnv(**(config or {}))
    raise ValueError(f"unknown environment kind {kind!r}")
