import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powerbeam import optics
from powerbeam.optics import ComplexField, ScreenSpec, WindModel

from oracles import structure_function_error, tilt_centroid_error

LAM = 1.064e-6


def gaussian(n=256, extent=0.2, w0=0.01):
    x, y = optics.grid_coords(n, n, extent / n)
    r2 = x[None, :] ** 2 + y[:, None] ** 2
    # 1/e intensity radius w0
    return ComplexField(np.exp(-r2 / (2 * w0**2)), extent, LAM)


def second_moment_radius(f):
    x, y = optics.grid_coords(f.nx, f.ny, f.pitch)
    inten = f.intensity()
    return np.sqrt((inten * x[None, :] ** 2).sum() / inten.sum())


def test_constant_field_is_invariant():
    f = ComplexField(np.full((64, 64), 2 + 1j), 0.1, LAM)
    g = optics.vacuum_propagate(f, 300.0)
    assert np.allclose(g.samples, f.samples, atol=1e-12)


def test_zero_step_is_identity():
    f = gaussian(64)
    assert np.array_equal(optics.vacuum_propagate(f, 0.0).samples, f.samples)


def test_negative_step_rejected():
    with pytest.raises(ValueError):
        optics.vacuum_propagate(gaussian(64), -1.0)


def test_non_power_of_two_rejected():
    with pytest.raises(ValueError):
        ComplexField(np.zeros((48, 48)), 0.1, LAM)


def test_gaussian_width_matches_analytic():
    w0, dz = 0.01, 500.0
    f = gaussian(512, 0.25, w0)
    k = 2 * np.pi / LAM
    # field amplitude exp(-r^2/(2 w0^2)) has amplitude radius sqrt(2) w0
    wa = np.sqrt(2) * w0
    expected = wa * np.sqrt(1 + (2 * dz / (k * wa**2)) ** 2) / 2
    got = second_moment_radius(optics.vacuum_propagate(f, dz))
    assert abs(got / expected - 1) <= 5e-3


def test_reciprocity_with_conjugate_transfer():
    rng = np.random.default_rng(0)
    f = ComplexField(rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64)), 0.1, LAM)
    g = optics.vacuum_propagate(f, 200.0)
    h = optics._transfer(64, 64, f.pitch, f.k, 200.0)
    back = np.fft.ifft2(np.fft.fft2(g.samples) * np.conj(h))
    assert np.linalg.norm(back - f.samples) / np.linalg.norm(f.samples) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(dz=st.floats(0.0, 5000.0), seed=st.integers(0, 2**31))
def test_vacuum_step_preserves_power(dz, seed):
    rng = np.random.default_rng(seed)
    f = ComplexField(rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32)), 0.1, LAM)
    p0 = optics.total_power(f)
    assert abs(optics.total_power(optics.vacuum_propagate(f, dz)) - p0) <= 1e-9 * p0


def spec(**kw):
    base = dict(cn2=1e-14, dz_weight=1000.0, wavelength=LAM, n=64, extent=0.8)
    base.update(kw)
    return ScreenSpec(**base)


def test_zero_cn2_screen_is_zero():
    s = optics.generate_screen(spec(cn2=0.0), 3)
    assert not s.tile(0).any()


def test_screen_is_deterministic_and_zero_mean():
    a = optics.generate_screen(spec(), 11).tile(0)
    b = optics.generate_screen(spec(), 11).tile(0)
    c = optics.generate_screen(spec(), 12).tile(0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert abs(a.mean()) < 1e-12


@pytest.mark.parametrize("kind", ["periodic", "infinite"])
def test_structure_function_matches_kolmogorov(kind):
    # Kolmogorov limit: huge outer scale, no inner scale
    sp = ScreenSpec(1e-14, 500.0, LAM, 128, 2.0, kind, outer_scale=1e4, inner_scale=0.0, subharmonics=5)
    assert structure_function_error(sp) <= 0.15


def test_default_periodic_screens_lack_low_frequencies():
    # without subharmonics the periodic tile underestimates large-lag structure
    sp = ScreenSpec(1e-14, 500.0, LAM, 128, 2.0, "periodic", outer_scale=1e4, inner_scale=0.0)
    assert sp.n_subharmonics == 0
    assert structure_function_error(sp) > 0.15


def test_frozen_wind_keeps_tile():
    s = optics.generate_screen(spec(), 1)
    assert np.array_equal(optics.sample_screen(s, 3.7, WindModel(0.0)), s.tile(0))


def test_periodic_full_cycle_is_identity():
    sp = spec()
    s = optics.generate_screen(sp, 2)
    out = optics.sample_screen(s, sp.extent / 4.0, WindModel(4.0))
    assert np.allclose(out, s.tile(0), atol=1e-12)


@pytest.mark.parametrize("kind", ["periodic", "infinite"])
def test_half_pixel_shift_averages_neighbours(kind):
    sp = spec(kind=kind)
    s = optics.generate_screen(sp, 4)
    t0 = optics.sample_screen(s, 0.0, WindModel(1.0))
    half = optics.sample_screen(s, 0.5 * sp.pitch, WindModel(1.0))
    # content moves towards +x: column j sees the average of j-1 and j
    assert np.allclose(half[:, 1:], 0.5 * (t0[:, 1:] + t0[:, :-1]), atol=1e-12)


def test_infinite_strip_is_continuous_and_lazy():
    sp = spec(kind="infinite")
    s = optics.generate_screen(sp, 5)
    assert s.span == (0, sp.n)
    far = optics.sample_screen(s, 3 * sp.extent, WindModel(1.0))
    assert far.shape == (sp.n, sp.n)
    assert s.span[0] < 0
    strip = s.strip_columns(s.span[0], s.span[1])
    jumps = np.abs(np.diff(strip, axis=1)).max(axis=0)
    assert jumps.max() < 8 * np.median(jumps)


def test_infinite_rejects_cross_strip_wind():
    s = optics.generate_screen(spec(kind="infinite"), 0)
    with pytest.raises(ValueError):
        optics.sample_screen(s, 1.0, WindModel(1.0, (0.0, 1.0)))


def test_split_step_reduces_to_vacuum_without_turbulence():
    f = gaussian(128, 0.2, 0.01)
    zs = optics.equidistant_positions(1000.0, 3)
    screens = [optics.generate_screen(spec(cn2=0.0, n=128, extent=0.2), i, z) for i, z in enumerate(zs)]
    out = optics.split_step_propagate(f, screens, WindModel(1.0), 0.3, 1000.0)
    ref = f
    z = 0.0
    for zz in list(zs) + [1000.0]:
        ref = optics.vacuum_propagate(ref, zz - z)
        z = zz
    assert np.allclose(out.samples, ref.samples, atol=1e-12)


def test_split_step_conserves_power():
    f = gaussian(128, 0.4, 0.02)
    zs = optics.equidistant_positions(2000.0, 4)
    screens = [optics.generate_screen(spec(n=128, extent=0.4), i, z) for i, z in enumerate(zs)]
    out = optics.split_step_propagate(f, screens, WindModel(2.0), 0.01, 2000.0)
    p0 = optics.total_power(f)
    assert abs(optics.total_power(out) - p0) / p0 <= 1e-6


def test_split_step_validates_positions():
    f = gaussian(64)
    a = optics.generate_screen(spec(), 0, 500.0)
    b = optics.generate_screen(spec(), 1, 200.0)
    with pytest.raises(ValueError):
        optics.split_step_propagate(f, [a, b], WindModel(), 0.0, 1000.0)
    with pytest.raises(ValueError):
        optics.split_step_propagate(f, [optics.generate_screen(spec(), 0, 1500.0)], WindModel(), 0.0, 1000.0)


def test_tilt_screen_moves_centroid():
    assert tilt_centroid_error() <= 1.0


def test_grid_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    for a in (rng.normal(size=(8, 16)), rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))):
        optics.write_grid(tmp_path / "g.bin", a, 0.5)
        b, ext = optics.read_grid(tmp_path / "g.bin")
        assert ext == 0.5 and b.dtype == a.dtype and np.array_equal(a, b)
    (tmp_path / "bad.bin").write_bytes(b"nope" * 10)
    with pytest.raises(ValueError):
        optics.read_grid(tmp_path / "bad.bin")
