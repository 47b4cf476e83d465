import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powerbeam import metrics
from powerbeam.environments import BeamingConfig, BeamingEnv, vacuum_j, _focus_guess
from powerbeam.fiber_array import Aperture, ControlVector, hexagonal_array
from powerbeam.metrics import (
    CircularTrajectory, MetricSpec, PvaSensor, RandomWalkTrajectory, TrackingParams,
    compute_j_vac, smooth_strehl, tracking_closed_form, tracking_intensity, tracking_metric,
    weighted_power,
)
from powerbeam import optics

PARAMS = TrackingParams()


# ------------------------------------------------------------------ tracking


def test_spot_starts_at_top():
    img = tracking_intensity(0.0, [0, 0], PARAMS)
    iy, ix = np.unravel_index(np.argmax(img), img.shape)
    c = PARAMS.coords()
    assert c[ix] == pytest.approx(0.0, abs=PARAMS.pitch)
    assert c[iy] == pytest.approx(1.0, abs=PARAMS.pitch)


def test_perfect_tracking_centres_spot():
    t = 12.3
    img = tracking_intensity(t, PARAMS.trajectory.position(t), PARAMS)
    assert np.unravel_index(np.argmax(img), img.shape) == (PARAMS.n // 2, PARAMS.n // 2)
    assert img.max() == 1.0
    assert tracking_metric(img, PARAMS) == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1000), st.floats(-2, 2), st.floats(-2, 2))
def test_peak_never_exceeds_one(t, ux, uy):
    img = tracking_intensity(t, [ux, uy], PARAMS)
    assert img.max() <= 1.0
    # the nearest pixel to the spot centre is within half a pixel diagonal
    assert img.max() >= np.exp(-(PARAMS.pitch**2 / 2) / PARAMS.beta1**2)


def test_metric_matches_closed_form_on_grid():
    pos = PARAMS.trajectory.position(0.0)
    err = 0.0
    for ax in np.linspace(-2, 2, 10):
        for ay in np.linspace(-2, 2, 10):
            img = tracking_intensity(0.0, pos - [ax, ay], PARAMS)
            err = max(err, abs(tracking_metric(img, PARAMS) - tracking_closed_form([ax, ay], PARAMS)))
    assert err <= 1e-3


def test_metric_reference_values():
    r = np.sqrt(PARAMS.beta1**2 + PARAMS.beta2**2)
    pos = PARAMS.trajectory.position(0.0)
    assert tracking_metric(tracking_intensity(0.0, pos - [r, 0], PARAMS), PARAMS) == pytest.approx(np.exp(-1), abs=1e-3)
    j2 = tracking_metric(tracking_intensity(0.0, pos - [0, 2.0], PARAMS), PARAMS)
    assert j2 == pytest.approx(np.exp(-4 / 1.16), abs=1e-3)
    assert np.exp(-4 / 1.16) == pytest.approx(0.0318, abs=1e-4)


def test_circular_trajectory_period():
    tr = CircularTrajectory()
    assert np.allclose(tr.position(300.0), tr.position(0.0))
    assert np.allclose(tr.position(75.0), [1.0, 0.0])


def test_random_walk_is_seeded_and_stationary():
    a, b = RandomWalkTrajectory(3), RandomWalkTrajectory(3)
    assert np.array_equal(a.position(57.3), b.position(57.3))
    assert not np.array_equal(a.position(5.0), RandomWalkTrajectory(4).position(5.0))
    path = np.array([a.position(0.1 * i) for i in range(200_000)])
    assert np.allclose(path.std(axis=0), 1.0, atol=0.15)
    innov = path[1:] - 0.995 * path[:-1]
    assert np.allclose(innov.var(axis=0), 1 - 0.995**2, rtol=0.02)
    mid = a.position(0.15)
    assert np.allclose(mid, 0.5 * (a.position(0.1) + a.position(0.2)))


# ------------------------------------------------------------------ strehl


def fine_sensor():
    return PvaSensor(0.2, 1024, 0.8 / 1024)


def test_zero_intensity_gives_zero():
    s = fine_sensor()
    assert smooth_strehl(np.zeros((s.native_res,) * 2), MetricSpec(j_vac=1.0), s) == 0.0


def test_missing_jvac_is_an_error():
    s = fine_sensor()
    with pytest.raises(metrics.ConfigurationError):
        smooth_strehl(np.zeros((s.native_res,) * 2), MetricSpec(), s)


def test_gaussian_spot_against_quadrature():
    s, beta = fine_sensor(), 0.01
    c = s.coords()
    spot = np.exp(-(c[:, None] ** 2 + c[None, :] ** 2) / beta**2) / (np.pi * beta**2)
    # product of two 1-D integrals of exp(-2 x^2 / beta^2) / (sqrt(pi) beta)
    from scipy.integrate import quad
    h = 0.1
    one = quad(lambda x: np.exp(-2 * x**2 / beta**2), -h, h, epsabs=1e-14)[0] / (np.sqrt(np.pi) * beta)
    got = weighted_power(spot, s, beta)
    assert got == pytest.approx(one**2, rel=1e-3)
    assert got == pytest.approx(0.5, rel=1e-3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_strehl_is_linear(seed, a):
    s = PvaSensor(0.2, 128, 0.8 / 128)
    rng = np.random.default_rng(seed)
    x, y = rng.random((2, s.native_res, s.native_res))
    spec = MetricSpec(j_vac=0.3)
    lhs = smooth_strehl(x + a * y, spec, s)
    rhs = smooth_strehl(x, spec, s) + a * smooth_strehl(y, spec, s)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_sensor_validation_and_downsample():
    with pytest.raises(metrics.ConfigurationError):
        PvaSensor(0.21, 256, 0.8 / 256)
    with pytest.raises(metrics.ConfigurationError):
        PvaSensor(0.2, 256, 0.8 / 256, out_res=48)
    s = PvaSensor(0.2, 256, 0.8 / 256, out_res=16)
    img = np.random.default_rng(0).random((64, 64))
    d = s.downsample(img)
    assert d.shape == (16, 16)
    assert d.sum() * 16 == pytest.approx(img.sum())


# ------------------------------------------------------------------ J_vac


def test_single_element_piston_is_global_phase():
    geom = hexagonal_array(1, 0.06)
    ap = Aperture(geom, 128, 0.8, 1.064e-6)
    sensor = PvaSensor(0.2, 128, 0.8 / 128)

    def obj(u):
        c = ControlVector.from_flat(u * 1.064e-6 / (2 * np.pi), 1, "piston")
        f = optics.vacuum_propagate(ap.field(c), 1000.0)
        return weighted_power(sensor.crop(f.intensity()), sensor, 0.05)

    res = compute_j_vac(obj, np.zeros(1), patience=50)
    assert res.value == pytest.approx(obj(np.zeros(1)), rel=1e-6)


def test_co_phased_pistons_are_optimal():
    geom = hexagonal_array(19, 0.06)
    # pitch must resolve the focusing tilts of the outer ring
    ap = Aperture(geom, 128, 0.4, 1.064e-6)
    sensor = PvaSensor(0.2, 128, 0.4 / 128)
    L = 5000.0
    focus = _focus_guess(BeamingConfig(length=L))

    def field_power(u):
        flat = focus.copy() * 1.064e-6 / (2 * np.pi)
        flat[:19] += u * 1.064e-6 / (2 * np.pi)
        flat[19:] /= 0.03
        f = optics.vacuum_propagate(ap.field(ControlVector.from_flat(flat, 19)), L)
        return weighted_power(sensor.crop(f.intensity()), sensor, 0.01)

    # symmetric focused array: equal pistons beat random restarts
    ref = field_power(np.zeros(19))
    rng = np.random.default_rng(0)
    others = [field_power(rng.uniform(-0.5, 0.5, 19)) for _ in range(20)]
    assert max(others) < ref
    res = compute_j_vac(field_power, rng.uniform(-0.3, 0.3, 19), seed=1, polish_sweeps=2)
    assert res.value == pytest.approx(ref, rel=1e-4)


def test_convergence_failure_carries_best():
    calls = iter(range(10**6))
    with pytest.raises(metrics.JvacConvergenceError) as e:
        compute_j_vac(lambda u: float(next(calls)), np.zeros(2), max_iter=5)
    assert e.value.best > 0


@pytest.fixture(scope="module")
def small_vacuum():
    cfg = BeamingConfig(n=128, n_screens=0, cn2=0.0, controller_res=32, beta=0.02)
    return BeamingEnv(cfg), vacuum_j(cfg)


def test_vacuum_optimum_normalises_to_one(small_vacuum):
    env, res = small_vacuum
    assert env.metric.j_vac == res.value
    raw = BeamingEnv(BeamingConfig(n=128, n_screens=0, cn2=0.0, controller_res=32, beta=0.02,
                                   prefocus=False, j_vac=res.value))
    _, J = raw.measure(res.controls)
    assert J == pytest.approx(1.0, abs=1e-6)
    _, J0 = raw.measure(np.zeros(raw.K))
    assert J0 < J


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 3.0))
def test_vacuum_metric_is_bounded(small_vacuum, seed, scale):
    env, _ = small_vacuum
    u = np.random.default_rng(seed).normal(size=env.K) * scale
    _, J = env.measure(u)
    assert 0.0 <= J <= 1 + 1e-9


def test_vacuum_restarts_agree():
    cfg = BeamingConfig(n=128, n_screens=0, cn2=0.0, controller_res=32, beta=0.02)
    a, b = vacuum_j(cfg, seed=0).value, vacuum_j(cfg, seed=5).value
    assert abs(a - b) / a <= 1e-4
