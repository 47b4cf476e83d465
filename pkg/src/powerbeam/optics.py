"""Scalar wave optics: sampled fields, angular-spectrum propagation and
thin turbulence phase screens with frozen-flow wind.

Arrays are indexed ``[iy, ix]`` and grid coordinates are
``x_j = (j - nx/2) * pitch`` so the optical axis sits on a pixel centre.
Everything runs in float64 / complex128.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ComplexField",
    "ScreenSpec",
    "PhaseScreen",
    "WindModel",
    "grid_coords",
    "total_power",
    "vacuum_propagate",
    "generate_screen",
    "sample_screen",
    "split_step_propagate",
    "equidistant_positions",
    "super_gaussian_absorber",
    "write_grid",
    "read_grid",
]


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class ComplexField:
    """Complex amplitude on a square-pixel grid.

    ``extent`` is the physical side length along x; the y side is
    ``ny * pitch``.
    """

    samples: np.ndarray
    extent: float
    wavelength: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 2:
            raise ValueError("field samples must be 2-D")
        ny, nx = self.samples.shape
        if not (_is_pow2(nx) and _is_pow2(ny)):
            raise ValueError(f"grid {nx}x{ny} is not a power of two")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")

    @property
    def nx(self) -> int:
        return self.samples.shape[1]

    @property
    def ny(self) -> int:
        return self.samples.shape[0]

    @property
    def pitch(self) -> float:
        return self.extent / self.nx

    @property
    def k(self) -> float:
        return 2 * np.pi / self.wavelength

    def intensity(self) -> np.ndarray:
        return self.samples.real**2 + self.samples.imag**2

    def with_samples(self, samples: np.ndarray) -> "ComplexField":
        return ComplexField(samples, self.extent, self.wavelength)


def grid_coords(nx: int, ny: int, pitch: float):
    """Return (x, y) 1-D coordinate vectors with the origin on pixel nx/2."""
    x = (np.arange(nx) - nx // 2) * pitch
    y = (np.arange(ny) - ny // 2) * pitch
    return x, y


def total_power(f: ComplexField) -> float:
    return float(f.intensity().sum() * f.pitch**2)


@functools.lru_cache(maxsize=64)
def _transfer(nx: int, ny: int, pitch: float, k: float, dz: float) -> np.ndarray:
    kx = 2 * np.pi * np.fft.fftfreq(nx, pitch)
    ky = 2 * np.pi * np.fft.fftfreq(ny, pitch)
    kk = ky[:, None] ** 2 + kx[None, :] ** 2
    h = np.exp(-1j * kk * dz / (2 * k))
    h.setflags(write=False)
    return h


def vacuum_propagate(f: ComplexField, dz: float) -> ComplexField:
    """Paraxial free-space step by ``dz`` metres (angular spectrum)."""
    if dz < 0:
        raise ValueError("dz must be non-negative")
    if dz == 0:
        return f.with_samples(f.samples.copy())
    h = _transfer(f.nx, f.ny, f.pitch, f.k, float(dz))
    return f.with_samples(np.fft.ifft2(np.fft.fft2(f.samples) * h))


def super_gaussian_absorber(nx: int, ny: int, width: float = 0.9, order: int = 16):
    """Edge absorber mask exp(-(r/R)^order), R = width * half-extent (in pixels)."""
    yy, xx = np.meshgrid(np.arange(ny) - ny // 2, np.arange(nx) - nx // 2, indexing="ij")
    r = np.hypot(xx / (width * nx / 2), yy / (width * ny / 2))
    return np.exp(-(r**order))


# ----------------------------------------------------------------- screens


@dataclass(frozen=True)
class ScreenSpec:
    """Statistics and sampling of one thin phase screen.

    ``subharmonics=None`` picks 5 levels for infinite strips and none for
    periodic tiles (subharmonic terms are not periodic over the tile).
    """

    cn2: float
    dz_weight: float
    wavelength: float
    n: int
    extent: float
    kind: str = "periodic"
    outer_scale: float = 10.0
    inner_scale: float = 1e-3
    subharmonics: int | None = None
    overlap: int = 8

    def __post_init__(self):
        if self.cn2 < 0:
            raise ValueError("cn2 must be >= 0")
        if not self.dz_weight > 0:
            raise ValueError("dz_weight must be > 0")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not _is_pow2(self.n):
            raise ValueError("screen size must be a power of two")
        if not self.extent > 0:
            raise ValueError("extent must be > 0")
        if self.kind not in ("periodic", "infinite"):
            raise ValueError(f"unknown screen kind {self.kind!r}")
        if not (self.outer_scale > self.inner_scale >= 0):
            raise ValueError("need outer_scale > inner_scale >= 0")
        if self.kind == "infinite" and not 0 < self.overlap < self.n // 2:
            raise ValueError("overlap must be in (0, n/2)")

    @property
    def k(self) -> float:
        return 2 * np.pi / self.wavelength

    @property
    def pitch(self) -> float:
        return self.extent / self.n

    @property
    def r0(self) -> float:
        """Fried parameter of this screen's slab (inf when cn2 == 0)."""
        if self.cn2 == 0:
            return np.inf
        return (0.423 * self.k**2 * self.cn2 * self.dz_weight) ** (-3 / 5)

    @property
    def n_subharmonics(self) -> int:
        if self.subharmonics is not None:
            return self.subharmonics
        return 5 if self.kind == "infinite" else 0


def _phase_psd(f: np.ndarray, spec: ScreenSpec) -> np.ndarray:
    # von Karman phase PSD in cycles/m with a Gaussian inner-scale roll-off
    f0 = 1.0 / spec.outer_scale
    psd = 0.023 * spec.r0 ** (-5 / 3) / (f**2 + f0**2) ** (11 / 6)
    if spec.inner_scale > 0:
        fm = 5.92 / (2 * np.pi * spec.inner_scale)
        psd = psd * np.exp(-((f / fm) ** 2))
    return psd


def _cell_variance(spec: ScreenSpec, fx: float, fy: float, width: float, m: int = 32) -> float:
    # |f|^2-weighted cell integral of the PSD, referred to the cell centre; keeps
    # the small-separation (quadratic) structure function exact for the cell
    u = (np.arange(m) + 0.5) / m - 0.5
    gx, gy = np.meshgrid(fx + u * width, fy + u * width)
    f2 = gx**2 + gy**2
    return float(np.mean(_phase_psd(np.sqrt(f2), spec) * f2) * width**2 / (fx**2 + fy**2))


_NEAR = 3  # FFT cells with |i|,|j| <= _NEAR get cell-integrated variances


@functools.lru_cache(maxsize=32)
def _spectral_weights(spec: ScreenSpec):
    n, d = spec.n, spec.pitch
    df = 1.0 / (n * d)
    fx = np.fft.fftfreq(n, d)
    var = _phase_psd(np.hypot(fx[:, None], fx[None, :]), spec) * df**2
    var[0, 0] = 0.0
    for i in range(-_NEAR, _NEAR + 1):
        for j in range(-_NEAR, _NEAR + 1):
            if i or j:
                var[i, j] = _cell_variance(spec, j * df, i * df, df)
    amp = np.sqrt(var)
    sub = []
    for p in range(1, spec.n_subharmonics + 1):
        dfp = df / 3**p
        for i in (-1, 0, 1):
            for j in (-1, 0, 1):
                if i or j:
                    sub.append((j * dfp, i * dfp, np.sqrt(_cell_variance(spec, j * dfp, i * dfp, dfp))))
    amp.setflags(write=False)
    return amp, tuple(sub)


def _tile(spec: ScreenSpec, rng: np.random.Generator) -> np.ndarray:
    n, d = spec.n, spec.pitch
    if spec.cn2 == 0:
        return np.zeros((n, n))
    amp, sub = _spectral_weights(spec)
    cn = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * amp
    phase = np.fft.ifft2(cn).real * (n * n)
    if sub:
        x = (np.arange(n) - n // 2) * d
        lo = np.zeros((n, n), dtype=np.complex128)
        for fxp, fyp, a in sub:
            c = (rng.standard_normal() + 1j * rng.standard_normal()) * a
            lo += c * np.outer(np.exp(2j * np.pi * fyp * x), np.exp(2j * np.pi * fxp * x))
        phase = phase + lo.real
    return phase - phase.mean()


def _tile_rng(seed: int, index: int) -> np.random.Generator:
    # zig-zag so negative tile indices get distinct, stable streams
    key = 2 * index if index >= 0 else -2 * index - 1
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


@dataclass
class PhaseScreen:
    """A frozen phase realisation (radians) placed at ``screen_z``.

    Periodic screens hold one tile. Infinite screens are an append-only
    strip along x: tile ``i`` starts at strip column ``i * (n - overlap)``
    and is cross-faded into its left neighbour over ``overlap`` columns.
    """

    spec: ScreenSpec
    seed: int
    screen_z: float = 0.0
    tiles: dict = field(default_factory=dict, repr=False)

    def tile(self, index: int = 0) -> np.ndarray:
        if index not in self.tiles:
            t = _tile(self.spec, _tile_rng(self.seed, index))
            t.setflags(write=False)
            self.tiles[index] = t
        return self.tiles[index]

    @property
    def span(self) -> tuple[int, int]:
        """Strip columns generated so far, as [first, last) (infinite kind)."""
        if not self.tiles:
            return (0, 0)
        s = self.spec.n - self.spec.overlap
        return (min(self.tiles) * s, max(self.tiles) * s + self.spec.n)

    def strip_columns(self, c0: int, c1: int) -> np.ndarray:
        """Columns [c0, c1) of the infinite strip, generating tiles on demand."""
        n, ov = self.spec.n, self.spec.overlap
        s = n - ov
        cols = np.arange(c0, c1)
        idx = np.floor_divide(cols, s)
        local = cols - idx * s
        out = np.empty((n, cols.size))
        for i in np.unique(idx):
            sel = idx == i
            cur = self.tile(int(i))
            lc = local[sel]
            block = cur[:, lc]
            seam = lc < ov
            if seam.any():
                prev = self.tile(int(i) - 1)
                w = (lc[seam] + 0.5) / ov
                block[:, seam] = (1 - w) * prev[:, s + lc[seam]] + w * cur[:, lc[seam]]
            out[:, sel] = block
        return out


@dataclass(frozen=True)
class WindModel:
    speed: float = 0.0
    direction: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("wind speed must be >= 0")
        if not np.isclose(np.hypot(*self.direction), 1.0, atol=1e-12):
            raise ValueError("wind direction must be a unit vector")


def generate_screen(spec: ScreenSpec, seed: int, screen_z: float = 0.0) -> PhaseScreen:
    """FFT spectral synthesis (plus subharmonics where enabled); tile 0 is built eagerly."""
    screen = PhaseScreen(spec, int(seed), screen_z)
    screen.tile(0)
    return screen


def _shift_periodic(a: np.ndarray, sx: float, sy: float) -> np.ndarray:
    # out[y, x] = a(y - sy, x - sx) with bilinear weights, periodic wrap
    ix, iy = int(np.floor(sx)), int(np.floor(sy))
    fx, fy = sx - ix, sy - iy
    b = np.roll(a, (iy, ix), axis=(0, 1))
    if fx:
        b = (1 - fx) * b + fx * np.roll(b, 1, axis=1)
    if fy:
        b = (1 - fy) * b + fy * np.roll(b, 1, axis=0)
    return b


def sample_screen(screen: PhaseScreen, t: float, wind: WindModel) -> np.ndarray:
    """Phase seen on the simulation grid at time ``t`` under frozen flow."""
    if t < 0:
        raise ValueError("t must be >= 0")
    spec = screen.spec
    dx = wind.speed * t * wind.direction[0] / spec.pitch
    dy = wind.speed * t * wind.direction[1] / spec.pitch
    if spec.kind == "periodic":
        a = screen.tile(0)
        if dx == 0 and dy == 0:
            return a.copy()
        return _shift_periodic(a, dx, dy)

    if abs(wind.direction[1]) > 1e-12 and wind.speed > 0:
        raise ValueError("infinite screens only move along the x strip axis")
    n = spec.n
    # grid column j sees strip coordinate j - dx
    ix = int(np.floor(-dx))
    fx = -dx - ix
    cols = screen.strip_columns(ix, ix + n + 1)
    if fx == 0:
        return cols[:, :n].copy()
    return (1 - fx) * cols[:, :n] + fx * cols[:, 1:]


def equidistant_positions(length: float, count: int) -> np.ndarray:
    """Screen positions at the centres of ``count`` equal slabs of the path."""
    return (np.arange(count) + 0.5) * length / count


def split_step_propagate(
    f: ComplexField,
    screens: list[PhaseScreen],
    wind: WindModel,
    t: float,
    length: float,
    absorber: np.ndarray | None = None,
) -> ComplexField:
    """Alternate vacuum steps and thin-screen phase kicks from z=0 to z=length."""
    zs = [s.screen_z for s in screens]
    if any(b <= a for a, b in zip(zs, zs[1:])):
        raise ValueError("screens must be sorted by strictly increasing screen_z")
    if any(not 0 < z < length for z in zs):
        raise ValueError("screen positions must lie in (0, length)")
    z = 0.0
    out = f
    for s in screens:
        out = vacuum_propagate(out, s.screen_z - z)
        if absorber is not None:
            out = out.with_samples(out.samples * absorber)
        if s.spec.cn2 > 0:
            phase = sample_screen(s, t, wind)
            out = out.with_samples(out.samples * np.exp(1j * phase))
        z = s.screen_z
    out = vacuum_propagate(out, length - z)
    if absorber is not None:
        out = out.with_samples(out.samples * absorber)
    return out


# ------------------------------------------------------------- binary dumps

_MAGIC = b"PBGRID\x00\x00"
_VERSION = 1


def write_grid(path, samples: np.ndarray, extent: float) -> None:
    """Dump a real or complex grid: 16-byte header, u32 nx, ny, f64 extent, f64 data."""
    a = np.asarray(samples)
    is_complex = np.iscomplexobj(a)
    ny, nx = a.shape
    head = _MAGIC + struct.pack("<II", _VERSION, 1 if is_complex else 0)
    head += struct.pack("<IId", nx, ny, float(extent))
    if is_complex:
        body = np.ascontiguousarray(a, dtype="<c16").view("<f8")
    else:
        body = np.ascontiguousarray(a, dtype="<f8")
    Path(path).write_bytes(head + body.tobytes())


def read_grid(path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a grid dump")
    version, flags = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise ValueError(f"unsupported grid dump version {version}")
    nx, ny, extent = struct.unpack_from("<IId", raw, 16)
    data = np.frombuffer(raw, dtype="<f8", offset=32)
    if flags & 1:
        a = data.view("<c16").reshape(ny, nx).astype(np.complex128)
    else:
        a = data.reshape(ny, nx).astype(np.float64)
    return a, extent
