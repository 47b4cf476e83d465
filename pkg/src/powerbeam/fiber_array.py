"""Fiber-array transmitter: hexagonal geometry, the controlled pupil field
and the Zernike <-> piston/tip-tilt transform.

Physical control units: pistons in metres of optical path, tips/tilts as
dimensionless slopes (m/m). The beamlet amplitude is
``exp(-|rho - rho_n|^2 / (2 a0^2))`` so that intensity falls to 1/e at
``a0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .optics import ComplexField, grid_coords

__all__ = [
    "ArrayGeometry",
    "hexagonal_array",
    "ControlVector",
    "Aperture",
    "source_field",
    "zernike",
    "zernike_modes",
    "ZernikeBasis",
    "build_r_matrix",
    "zernike_to_controls",
    "disc_quadrature",
]


@dataclass(frozen=True)
class ArrayGeometry:
    centers: np.ndarray  # (n_sa, 2) metres
    d: float
    a0: float
    A0: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "centers", c)
        if not self.d > 0 or not self.a0 > 0 or self.A0 < 0:
            raise ValueError("need d > 0, a0 > 0, A0 >= 0")
        if len(c) > 1:
            dist = np.hypot(*(c[:, None, :] - c[None, :, :]).transpose(2, 0, 1))
            dist[np.diag_indices(len(c))] = np.inf
            if dist.min() < self.d * (1 - 1e-9):
                raise ValueError("subapertures overlap")

    @property
    def n_sa(self) -> int:
        return len(self.centers)

    @property
    def radius(self) -> float:
        """Radius of the circumscribed aperture disc."""
        return float(np.hypot(*self.centers.T).max() + self.d / 2)

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "d": self.d, "a0": self.a0, "A0": self.A0}


def hexagonal_array(n_sa: int = 19, d: float = 0.06, a0: float | None = None, A0: float = 1.0):
    """Densely packed hexagonal layout with neighbour pitch ``d``.

    ``n_sa`` must be a centred hexagonal number (1, 7, 19, 37, ...).
    ``a0`` defaults to 0.45 d (1/e intensity diameter 0.9 d).
    """
    rings = 0
    while 1 + 3 * rings * (rings + 1) < n_sa:
        rings += 1
    if 1 + 3 * rings * (rings + 1) != n_sa:
        raise ValueError(f"{n_sa} is not a centred hexagonal number")
    pts = [(0.0, 0.0)]
    dirs = [(np.cos(a), np.sin(a)) for a in np.arange(6) * np.pi / 3]
    for ring in range(1, rings + 1):
        # start at ring * dirs[4] and walk the six sides
        x, y = ring * dirs[4][0], ring * dirs[4][1]
        for side in range(6):
            dx, dy = dirs[side]
            for _ in range(ring):
                pts.append((x, y))
                x, y = x + dx, y + dy
    centers = np.round(np.array(pts) * d, 15)
    return ArrayGeometry(centers, d, 0.45 * d if a0 is None else a0, A0)


@dataclass
class ControlVector:
    """Per-subaperture pistons (m) and tip/tilt slopes (m/m).

    In piston-only mode the flat vector has length n_sa and the slopes stay
    at whatever constants they were built with.
    """

    pistons: np.ndarray
    tips: np.ndarray
    tilts: np.ndarray
    mode: str = "piston_tiptilt"

    def __post_init__(self):
        self.pistons = np.asarray(self.pistons, dtype=float)
        self.tips = np.asarray(self.tips, dtype=float)
        self.tilts = np.asarray(self.tilts, dtype=float)
        if self.mode not in ("piston", "piston_tiptilt"):
            raise ValueError(f"unknown control mode {self.mode!r}")
        if not (self.pistons.shape == self.tips.shape == self.tilts.shape):
            raise ValueError("pistons/tips/tilts length mismatch")

    @property
    def n_sa(self) -> int:
        return self.pistons.size

    @property
    def K(self) -> int:
        return self.n_sa if self.mode == "piston" else 3 * self.n_sa

    def flat(self) -> np.ndarray:
        if self.mode == "piston":
            return self.pistons.copy()
        return np.concatenate([self.pistons, self.tips, self.tilts])

    @classmethod
    def zeros(cls, n_sa: int, mode: str = "piston_tiptilt"):
        z = np.zeros(n_sa)
        return cls(z, z.copy(), z.copy(), mode)

    @classmethod
    def from_flat(cls, u, n_sa: int, mode: str = "piston_tiptilt", tips=None, tilts=None):
        u = np.asarray(u, dtype=float)
        if mode == "piston":
            if u.size != n_sa:
                raise ValueError(f"expected {n_sa} controls, got {u.size}")
            tips = np.zeros(n_sa) if tips is None else tips
            tilts = np.zeros(n_sa) if tilts is None else tilts
            return cls(u.copy(), tips, tilts, mode)
        if u.size != 3 * n_sa:
            raise ValueError(f"expected {3 * n_sa} controls, got {u.size}")
        return cls(u[:n_sa].copy(), u[n_sa : 2 * n_sa].copy(), u[2 * n_sa :].copy(), mode)


class Aperture:
    """Pixel bookkeeping for evaluating the pupil field of one geometry on one grid."""

    def __init__(self, geom: ArrayGeometry, n: int, extent: float, wavelength: float):
        self.geom, self.n, self.extent, self.wavelength = geom, n, extent, wavelength
        pitch = extent / n
        x, y = grid_coords(n, n, pitch)
        if geom.radius > x[-1] or geom.radius > -x[0]:
            raise ValueError("grid does not cover the fiber array")
        self._idx, self._dx, self._dy, self._amp = [], [], [], []
        r = geom.d / 2
        for cx, cy in geom.centers:
            ix = np.nonzero(np.abs(x - cx) <= r)[0]
            iy = np.nonzero(np.abs(y - cy) <= r)[0]
            dx = x[ix][None, :] - cx
            dy = y[iy][:, None] - cy
            dx, dy = np.broadcast_arrays(dx, dy)
            inside = dx**2 + dy**2 <= r**2
            flat = (iy[:, None] * n + ix[None, :])[inside]
            self._idx.append(flat)
            self._dx.append(dx[inside])
            self._dy.append(dy[inside])
            self._amp.append(geom.A0 * np.exp(-(dx[inside] ** 2 + dy[inside] ** 2) / (2 * geom.a0**2)))

    def field(self, ctrl: ControlVector) -> ComplexField:
        if ctrl.n_sa != self.geom.n_sa:
            raise ValueError("control vector does not match the geometry")
        k = 2 * np.pi / self.wavelength
        out = np.zeros(self.n * self.n, dtype=np.complex128)
        for i in range(self.geom.n_sa):
            phi = ctrl.tips[i] * self._dx[i] + ctrl.tilts[i] * self._dy[i] + ctrl.pistons[i]
            out[self._idx[i]] += self._amp[i] * np.exp(1j * k * phi)
        return ComplexField(out.reshape(self.n, self.n), self.extent, self.wavelength)


def source_field(geom: ArrayGeometry, ctrl: ControlVector, n: int, extent: float, wavelength: float):
    """Pupil-plane field: sum of truncated Gaussian beamlets with linear phases."""
    return Aperture(geom, n, extent, wavelength).field(ctrl)


# ----------------------------------------------------------------- Zernike


def zernike_modes(n_max: int) -> list[tuple[int, int]]:
    """(n, m) list for radial degrees 1..n_max.

    Degree 1 is ordered x-tilt then y-tilt; higher degrees follow ANSI
    order (m = -n, -n+2, ..., n), so degree 2 reads oblique astigmatism,
    defocus, vertical astigmatism.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    modes = [(1, 1), (1, -1)]
    for n in range(2, n_max + 1):
        modes += [(n, m) for m in range(-n, n + 1, 2)]
    return modes


def zernike(n: int, m: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Zernike polynomial with unit mean square over the unit disc."""
    am = abs(m)
    radial = np.zeros_like(rho, dtype=float)
    for s in range((n - am) // 2 + 1):
        c = (-1) ** s * factorial(n - s) / (factorial(s) * factorial((n + am) // 2 - s) * factorial((n - am) // 2 - s))
        radial = radial + c * rho ** (n - 2 * s)
    if m == 0:
        return np.sqrt(n + 1) * radial
    norm = np.sqrt(2 * (n + 1))
    return norm * radial * (np.cos(am * theta) if m > 0 else np.sin(am * theta))


def disc_quadrature(radius: float, n_r: int = 128, n_theta: int = 128):
    """Polar tensor-product rule on a disc: Gauss-Legendre in r, uniform in theta.

    Returns offsets (dx, dy) and weights that integrate polynomials of
    moderate degree exactly.
    """
    g, w = np.polynomial.legendre.leggauss(n_r)
    r = (g + 1) * radius / 2
    wr = w * radius / 2 * r
    th = np.arange(n_theta) * 2 * np.pi / n_theta
    wt = 2 * np.pi / n_theta
    dx = (r[:, None] * np.cos(th)[None, :]).ravel()
    dy = (r[:, None] * np.sin(th)[None, :]).ravel()
    weights = (wr[:, None] * wt * np.ones(n_theta)[None, :]).ravel()
    return dx, dy, weights


@dataclass
class ZernikeBasis:
    n_max: int
    radius: float
    modes: list = field(repr=False)
    R: np.ndarray = field(repr=False)  # (K, Q)
    mode: str = "piston_tiptilt"

    @property
    def Q(self) -> int:
        return len(self.modes)

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Stack of the Q polynomials at physical points, shape (Q, *x.shape)."""
        rho = np.hypot(x, y) / self.radius
        th = np.arctan2(y, x)
        return np.stack([zernike(n, m, rho, th) for n, m in self.modes])

    def to_dict(self) -> dict:
        return {"n_max": self.n_max, "radius": self.radius, "mode": self.mode}


def build_r_matrix(
    geom: ArrayGeometry,
    n_max: int = 4,
    radius: float | None = None,
    mode: str = "piston_tiptilt",
    quad: int = 128,
    slopes: str = "fit",
) -> ZernikeBasis:
    """K x Q transform from Zernike coefficients to pistons/tips/tilts.

    Piston rows are subaperture averages of each polynomial. Slope rows are
    the (x - x_n) and (y - y_n) moments; with ``slopes="fit"`` they are
    divided by the disc second moment so they equal the least-squares
    slope, with ``slopes="moment"`` they keep the bare 4/(pi d^2) scaling.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if slopes not in ("fit", "moment"):
        raise ValueError("slopes must be 'fit' or 'moment'")
    radius = geom.radius if radius is None else radius
    if np.hypot(*geom.centers.T).max() + geom.d / 2 > radius * (1 + 1e-12):
        raise ValueError("subapertures must lie inside the aperture disc")
    basis = ZernikeBasis(n_max, radius, zernike_modes(n_max), np.empty(0), mode)
    d = geom.d
    dx, dy, w = disc_quadrature(d / 2, quad, quad)
    scale = 4 / (np.pi * d**2)
    slope_scale = scale * (16 / d**2 if slopes == "fit" else 1.0)
    n_sa = geom.n_sa
    rows = np.zeros((3 * n_sa, basis.Q))
    for i, (cx, cy) in enumerate(geom.centers):
        z = basis.evaluate(cx + dx, cy + dy)  # (Q, npts)
        rows[i] = scale * (z @ w)
        rows[n_sa + i] = slope_scale * (z @ (w * dx))
        rows[2 * n_sa + i] = slope_scale * (z @ (w * dy))
    basis.R = rows[:n_sa] if mode == "piston" else rows
    return basis


def zernike_to_controls(u_z, basis: ZernikeBasis) -> ControlVector:
    """u = u_Z R, reshaped into pistons / tips / tilts."""
    u_z = np.asarray(u_z, dtype=float)
    if u_z.shape != (basis.Q,):
        raise ValueError(f"expected {basis.Q} Zernike coefficients, got shape {u_z.shape}")
    u = u_z @ basis.R.T
    n_sa = basis.R.shape[0] if basis.mode == "piston" else basis.R.shape[0] // 3
    return ControlVector.from_flat(u, n_sa, basis.mode)
