import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from powerbeam.neural import (
    DnnSpec, DnnState, Observation, TrainingHyper, apply_update, forward, load_checkpoint,
    save_checkpoint, update_weights, weighted_output_grad,
)

from oracles import finite_difference, relative_error

SMALL = [
    DnnSpec(image_shape=(8, 8), K=2, conv_channels=(2, 3, 3), kernel=3, pool=(2, 2, 2), conv_activation="tanh"),
    DnnSpec(image_shape=(8, 8), K=3, conv_channels=(2, 2), kernel=3, pool=(2, 2), conv_activation="relu"),
    DnnSpec(image_shape=(16, 8), K=1, conv_channels=(1, 2, 2), kernel=5, pool=(2, 2, 2), conv_activation="linear"),
    DnnSpec(image_shape=(8, 8), K=2, conv_channels=(3,), kernel=3, pool=(4,), gru_mult=3, dense_mult=2),
    DnnSpec(image_shape=(8, 8), K=2, conv_channels=(2, 2), kernel=3, pool=(2, 2), n_aux_controls=4,
            control_scale=0.5, image_scale=3.0),
    DnnSpec(image_shape=(8, 8), K=2, conv_channels=(2, 2, 2), kernel=3, pool=(2, 2, 2), output_scale=2.0,
            conv_activation="tanh"),
]


def window(spec, rng, n=None):
    n = spec.window if n is None else n
    m = spec.aux_size - 1
    return [Observation(rng.random(spec.image_shape), float(rng.random()), rng.normal(size=m)) for _ in range(n)]


def randomise(state, rng, scale=0.5):
    state.alpha[...] = rng.normal(scale=scale, size=state.P)
    state.h[...] = rng.uniform(-0.5, 0.5, state.h.size)


@pytest.mark.parametrize("i", range(len(SMALL)))
def test_gradient_matches_finite_differences(i):
    spec = SMALL[i]
    rng = np.random.default_rng(100 + i)
    st_ = DnnState.create(spec, seed=i)
    randomise(st_, rng)
    win = window(spec, rng)
    w = rng.normal(size=(spec.window, spec.K))
    h0 = st_.h.copy()
    g = weighted_output_grad(st_, win, w, h0=h0)
    fd = finite_difference(st_, win, w, h0)
    assert relative_error(g, fd).max() <= 1e-4


def test_zero_network_outputs_zero():
    spec = SMALL[0]
    st_ = DnnState.create(spec, zero=True)
    out, _ = forward(st_, window(spec, np.random.default_rng(0)))
    assert out.shape == (4, 2) and not out.any()


def test_forward_is_deterministic_and_pure():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=1)
    win = window(spec, np.random.default_rng(2))
    a, ha = forward(st_, win)
    b, hb = forward(st_, win)
    assert np.array_equal(a, b) and np.array_equal(ha, hb)
    assert not st_.h.any()


def test_window_length_checked():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=1)
    with pytest.raises(ValueError):
        forward(st_, window(spec, np.random.default_rng(0), 3))
    bad = window(spec, np.random.default_rng(0))
    bad[0].image = np.zeros((4, 4))
    with pytest.raises(ValueError):
        forward(st_, bad)


@pytest.mark.parametrize("i", range(len(SMALL)))
def test_replica_consistency(i):
    spec = SMALL[i]
    rng = np.random.default_rng(i)
    st_ = DnnState.create(spec, seed=i)
    randomise(st_, rng)
    win = window(spec, rng)
    h0 = st_.h.copy()
    ref, href = forward(st_, win, h0=h0)
    outs = [st_.step(o) for o in win]
    assert np.max(np.abs(np.array(outs) - ref)) <= 1e-12
    assert np.max(np.abs(st_.h - href)) <= 1e-12


def test_zero_weights_zero_gradient():
    spec = SMALL[1]
    st_ = DnnState.create(spec, seed=0)
    win = window(spec, np.random.default_rng(0))
    assert not weighted_output_grad(st_, win, np.zeros((4, spec.K))).any()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_gradient_is_linear_in_weights(seed):
    spec = SMALL[0]
    rng = np.random.default_rng(seed)
    st_ = DnnState.create(spec, seed=3)
    win = window(spec, rng)
    w1, w2 = rng.normal(size=(2, 4, 2))
    g12 = weighted_output_grad(st_, win, w1 + w2)
    g = weighted_output_grad(st_, win, w1) + weighted_output_grad(st_, win, w2)
    assert np.max(np.abs(g12 - g)) <= 1e-12 * max(np.abs(g).max(), 1e-300)


def test_non_finite_weights_rejected():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=0)
    w = np.zeros((4, 2))
    w[1, 1] = np.nan
    with pytest.raises(ValueError):
        weighted_output_grad(st_, window(spec, np.random.default_rng(0)), w)


def test_pure_decay():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=0)
    a0 = st_.alpha.copy()
    win = window(spec, np.random.default_rng(0))
    update_weights(st_, win, np.zeros((4, 2)), np.zeros(2), TrainingHyper(0.0, 1e-3, 0.0))
    assert np.allclose(st_.alpha, a0 * (1 - 2e-3), rtol=1e-15, atol=0)


def test_all_terms_zero_is_identity():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=0)
    a0 = st_.alpha.copy()
    update_weights(st_, window(spec, np.random.default_rng(0)), np.zeros((4, 2)), np.zeros(2), TrainingHyper())
    assert np.array_equal(st_.alpha, a0) and not st_.g.any()


def test_momentum_geometric_series():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=0)
    G = np.random.default_rng(1).normal(size=st_.P)
    hyper = TrainingHyper(0.0, 0.0, 0.9)
    for n in range(1, 30):
        apply_update(st_, G, hyper)
        assert np.max(np.abs(st_.g - G * (1 - 0.9**n) / 0.1)) <= 1e-12 * np.abs(G).max() * 10


def test_non_finite_gradient_leaves_state():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=0)
    a0, g0 = st_.alpha.copy(), st_.g.copy()
    bad = np.zeros(st_.P)
    bad[3] = np.inf
    with pytest.raises(FloatingPointError):
        apply_update(st_, bad, TrainingHyper(0.0, 1e-3, 0.9))
    assert np.array_equal(st_.alpha, a0) and np.array_equal(st_.g, g0)


def test_smoothness_term_matches_expansion():
    spec = SMALL[0]
    rng = np.random.default_rng(5)
    st_ = DnnState.create(spec, seed=5)
    win = window(spec, rng)
    mw = rng.normal(size=(4, 2))
    prev = rng.normal(size=2)
    h0 = st_.h.copy()
    out, _ = forward(st_, win, h0=h0)
    p = np.vstack([prev, out[:-1]])
    expected_grad = weighted_output_grad(st_, win, mw - 2 * 0.01 * (out - p), h0=h0)
    ref = st_.alpha + expected_grad
    update_weights(st_, win, mw, prev, TrainingHyper(0.01, 0.0, 0.0), h0=h0)
    assert np.max(np.abs(st_.alpha - ref)) <= 1e-14


def test_training_changes_inference_immediately():
    spec = SMALL[0]
    rng = np.random.default_rng(0)
    st_ = DnnState.create(spec, seed=0)
    win = window(spec, rng)
    before = forward(st_, win[:1], replica=1)[0]
    update_weights(st_, win, rng.normal(size=(4, 2)), np.zeros(2), TrainingHyper())
    after = forward(st_, win[:1], replica=1)[0]
    assert not np.array_equal(before, after)


def test_tanh_layers_bounded_output_unbounded():
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=0)
    st_.alpha *= 50
    win = window(spec, np.random.default_rng(0))
    _, _, cache = st_.net.forward(st_.alpha, *st_._stack(win), st_.h, keep=True)
    for key in ("d1", "d2", "hseq"):
        assert np.all(np.abs(cache[key]) <= 1)
    out, _ = forward(st_, win)
    assert np.abs(out).max() > 1


def test_glorot_init_scale():
    spec = DnnSpec(image_shape=(64, 64), K=4, pool=(2, 2, 2))
    st_ = DnnState.create(spec, seed=0)
    v = st_.net.views(st_.alpha)
    W = v["d1.W"]
    bound = np.sqrt(6 / sum(W.shape))
    assert np.abs(W).max() <= bound and np.abs(W).max() > 0.9 * bound
    assert not v["out.b"].any()


def test_parameter_count_default():
    spec = DnnSpec()
    assert spec.feature_size == 128
    s = DnnState.create(spec)
    assert s.P == s.net.size and s.alpha.shape == (s.P,)


def test_checkpoint_roundtrip(tmp_path):
    spec = SMALL[0]
    st_ = DnnState.create(spec, seed=4)
    st_.g[...] = np.arange(st_.P)
    save_checkpoint(tmp_path / "c.bin", st_)
    back = load_checkpoint(tmp_path / "c.bin", spec.replica(1))
    assert np.array_equal(back.alpha, st_.alpha) and np.array_equal(back.g, st_.g)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "c.bin", SMALL[1])


def test_spec_validation():
    with pytest.raises(ValueError):
        DnnSpec(image_shape=(10, 10))
    with pytest.raises(ValueError):
        DnnSpec(kernel=4)
    with pytest.raises(ValueError):
        DnnSpec(conv_activation="sigmoid")
    assert DnnSpec(pool=2, image_shape=(8, 8)).pool == (2, 2, 2)
