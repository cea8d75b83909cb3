import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cnftpr import autodiff as ad
from cnftpr.flow import (
    CHECKPOINT_MAGIC,
    EXACT,
    HUTCHINSON,
    FlowModel,
    TraceMode,
    exact_trace,
    gaussian_logpdf,
    hutchinson_trace,
    log_likelihood,
    make_dynamics,
    push_forward,
    rademacher,
    sample,
    velocity,
)
from cnftpr.ode import SolverConfig
from cnftpr.training import grid_points
from conftest import constant_field, linear_field_1d

LOG_2PI = math.log(2 * math.pi)
A = np.array([[1.0, 2.0], [3.0, 4.0]])


def linear_velocity(tape, y0):
    y = tape.leaf(y0)
    return ad.matmul(y, A.T), y


def test_zero_last_layer_gives_zero_velocity(rng):
    model = FlowModel.init(2, (8, 8), seed=3, zero_last=True)
    v = velocity(model.params, rng.standard_normal((5, 2)), 0.7)
    np.testing.assert_array_equal(v, 0.0)


def test_velocity_is_repeatable(rng):
    model = FlowModel.init(2, (8, 8), seed=3)
    y = rng.standard_normal((4, 2))
    assert velocity(model.params, y, 0.3).tobytes() == velocity(model.params, y, 0.3).tobytes()


def test_velocity_depends_on_time(rng):
    model = FlowModel.init(2, (8, 8), seed=3)
    y = rng.standard_normal((4, 2))
    assert np.linalg.norm(velocity(model.params, y, 0.2) - velocity(model.params, y, 0.3)) > 0


def test_velocity_width_mismatch():
    model = FlowModel.init(2, (8,), seed=0)
    with pytest.raises(ad.TapeError, match="width"):
        velocity(model.params, np.zeros((3, 3)), 0.0)


def test_fused_layer_matches_primitive_ops(rng):
    model = FlowModel.init(2, (5,), seed=1)
    p = model.params
    y0, t = rng.standard_normal((3, 2)), 0.4
    sig = lambda x: 1 / (1 + np.exp(-x))
    h = np.tanh((y0 @ p["W0"] + p["b0"]) * sig(t * p["gate_w0"] + p["gate_b0"]) + t * p["hyper_w0"])
    out = (h @ p["W1"] + p["b1"]) * sig(t * p["gate_w1"] + p["gate_b1"]) + t * p["hyper_w1"]
    np.testing.assert_allclose(velocity(p, y0, t), out, rtol=1e-13)


def test_exact_trace_of_linear_field():
    tape = ad.Tape()
    v, y = linear_velocity(tape, np.ones((1, 2)))
    assert float(exact_trace(v, y).value[0, 0]) == pytest.approx(5.0)


def test_exact_trace_of_zero_field():
    tape = ad.Tape()
    y = tape.leaf(np.ones((2, 2)))
    v = ad.mul(y, 0.0)
    np.testing.assert_array_equal(exact_trace(v, y, create_graph=False), 0.0)


def test_hutchinson_quadratic_form():
    tape = ad.Tape()
    v, y = linear_velocity(tape, np.ones((1, 2)))
    assert float(hutchinson_trace(v, y, np.ones((1, 2))).value[0, 0]) == pytest.approx(10.0)


@given(signs=st.lists(st.sampled_from([-1.0, 1.0]), min_size=3, max_size=3))
def test_hutchinson_of_identity_is_dimension(signs):
    tape = ad.Tape()
    y = tape.leaf(np.zeros((1, 3)))
    assert float(hutchinson_trace(y, y, np.array([signs]), create_graph=False)[0, 0]) == 3.0


def test_hutchinson_shape_checked():
    tape = ad.Tape()
    y = tape.leaf(np.zeros((2, 2)))
    with pytest.raises(ad.TapeError, match="shape"):
        hutchinson_trace(y, y, np.ones((2, 3)))


def fd_jacobian(params, y0, t, step=1e-6):
    cols = []
    for j in range(y0.shape[1]):
        e = np.zeros_like(y0)
        e[:, j] = step
        cols.append((velocity(params, y0 + e, t) - velocity(params, y0 - e, t)) / (2 * step))
    return np.stack(cols, axis=2)  # (batch, out, in)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_exact_trace_matches_finite_differences(rng, dim):
    model = FlowModel.init(dim, (16, 16), seed=dim)
    y0, t = rng.standard_normal((4, dim)), 0.61
    tape = ad.Tape()
    y = tape.leaf(y0)
    tr = exact_trace(velocity(model.params, y, t), y, create_graph=False)[:, 0]
    J = fd_jacobian(model.params, y0, t)
    np.testing.assert_allclose(tr, np.trace(J, axis1=1, axis2=2), rtol=1e-4, atol=1e-8)


def test_hutchinson_mean_approaches_exact_trace(rng):
    model = FlowModel.init(2, (16,), seed=5)
    y0, t, K = rng.standard_normal((1, 2)), 0.5, 2000
    tape = ad.Tape()
    y = tape.leaf(np.repeat(y0, K, axis=0))
    v = velocity(model.params, y, t)
    est = hutchinson_trace(v, y, rademacher(rng, (K, 2)), create_graph=False)[:, 0]
    exact = exact_trace(v, y, create_graph=False)[0, 0]
    assert abs(est.mean() - exact) < 3 * est.std(ddof=1) / math.sqrt(K) + 1e-12


def test_rademacher_entries(rng):
    eps = rademacher(rng, (1000, 2))
    assert set(np.unique(eps)) == {-1.0, 1.0}


def test_augmented_dynamics_of_zero_field(rng):
    model = FlowModel.init(2, (4,), seed=0, zero_last=True)
    dyn = make_dynamics(model.params, 2)
    np.testing.assert_array_equal(dyn(np.c_[rng.standard_normal((3, 2)), np.zeros(3)], 0.2), 0.0)


@pytest.mark.parametrize("c", [(0.5, -1.0), (2.0, 0.0)])
def test_constant_field_translates_without_density_change(c):
    model = constant_field(c)
    x = np.array([[0.1, 0.2], [-1.0, 3.0]])
    dyn = make_dynamics(model.params, 2)
    out = dyn(np.c_[x, np.zeros(2)], 0.4)
    np.testing.assert_array_equal(out[:, 2], 0.0)
    np.testing.assert_allclose(out[:, :2], np.broadcast_to(c, (2, 2)))
    sol = push_forward(model, x, SolverConfig())
    np.testing.assert_allclose(sol.final, x + np.asarray(c), atol=1e-12)


def test_linear_field_density_change():
    model = linear_field_1d(1.0)
    x = np.array([[0.7], [-0.2]])
    logq, sol = log_likelihood(model, x, SolverConfig(atol=1e-9, rtol=1e-9))
    np.testing.assert_allclose(sol.final[:, 0], math.e * x[:, 0], rtol=1e-8)
    np.testing.assert_allclose(sol.final[:, 1], -1.0, rtol=1e-8)
    np.testing.assert_allclose(logq[:, 0], -0.5 * LOG_2PI - 0.5 * (math.e * x[:, 0]) ** 2 + 1.0, rtol=1e-8)


def test_linear_field_at_origin():
    logq, _ = log_likelihood(linear_field_1d(1.0), np.zeros((1, 1)), SolverConfig(atol=1e-9, rtol=1e-9))
    assert logq[0, 0] == pytest.approx(-0.5 * LOG_2PI + 1.0, abs=1e-8)


def test_identity_flow_log_likelihood(rng):
    model = FlowModel.init(2, (8, 8), seed=2, zero_last=True)
    x = rng.standard_normal((6, 2))
    logq, sol = log_likelihood(model, x, SolverConfig())
    expected = -LOG_2PI - 0.5 * np.sum(x * x, axis=1)
    np.testing.assert_allclose(logq[:, 0], expected, rtol=0, atol=1e-15)
    assert sol.stats.nfe == 7


def test_standard_normal_at_origin():
    model = FlowModel.init(2, (4,), seed=0, zero_last=True)
    logq, _ = log_likelihood(model, np.zeros((1, 2)), SolverConfig())
    assert logq[0, 0] == pytest.approx(-1.8379, abs=1e-4)


def test_recorded_and_numeric_log_likelihood_agree(rng):
    model = FlowModel.init(2, (8, 8), seed=4)
    x = rng.standard_normal((5, 2))
    numeric, _ = log_likelihood(model, x, SolverConfig())
    recorded, _ = log_likelihood(model, x, SolverConfig(), tape=ad.Tape())
    np.testing.assert_allclose(recorded.value, numeric, rtol=1e-12)


def test_log_likelihood_shape_checked():
    with pytest.raises(ValueError, match="shape"):
        log_likelihood(FlowModel.init(2, (4,)), np.zeros((3, 3)), SolverConfig())


def test_hutchinson_trace_mode_needs_noise():
    with pytest.raises(ValueError):
        make_dynamics(FlowModel.init(2, (4,)).params, 2, HUTCHINSON)
    with pytest.raises(ValueError):
        TraceMode("nope")


def test_hutchinson_log_likelihood_differentiable(rng):
    model = FlowModel.init(2, (8,), seed=7)
    x = rng.standard_normal((3, 2))
    eps = rademacher(rng, x.shape)
    tape = ad.Tape()
    params = model.bind(tape)
    logq, _ = log_likelihood(model, x, SolverConfig(), HUTCHINSON, tape=tape, params=params, eps=eps)
    grads = ad.backward(ad.mean(logq))
    assert all(np.all(np.isfinite(grads[p])) for p in params.values())


def test_sampling_zero_field_returns_noise(rng):
    model = FlowModel.init(2, (4,), seed=0, zero_last=True)
    noise = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(sample(model, 5, 0, SolverConfig(), noise=noise), noise)


def test_sampling_constant_field_shifts_noise(rng):
    c = np.array([0.3, -0.6])
    noise = rng.standard_normal((5, 2))
    out = sample(constant_field(c), 5, 0, SolverConfig(), noise=noise)
    np.testing.assert_allclose(out, noise - c, atol=1e-12)


@given(seed=st.integers(0, 1000))
def test_round_trip_recovers_noise(seed):
    model = FlowModel.init(2, (8, 8), seed=seed)
    cfg = SolverConfig(atol=1e-6, rtol=1e-6)
    noise = np.random.default_rng(seed).standard_normal((8, 2))
    x = sample(model, 8, seed, cfg, noise=noise)
    back = push_forward(model, x, cfg).final
    assert np.max(np.abs(back - noise)) < 100 * cfg.atol


def test_untrained_model_density_is_normalized():
    model = FlowModel.init(2, (16, 16), seed=11)
    cfg = SolverConfig(atol=1e-6, rtol=1e-6)
    n = 301
    pts = grid_points((-6.0, 6.0), n)
    logq = np.concatenate([log_likelihood(model, pts[i:i + 8192], cfg)[0][:, 0] for i in range(0, len(pts), 8192)])
    axis = np.linspace(-6, 6, n)
    mass = np.trapezoid(np.trapezoid(np.exp(logq).reshape(n, n), axis, axis=1), axis)
    assert mass == pytest.approx(1.0, abs=1e-2)


def test_gaussian_logpdf():
    z = np.array([[0.0, 0.0], [1.0, -2.0]])
    np.testing.assert_allclose(gaussian_logpdf(z)[:, 0], [-LOG_2PI, -LOG_2PI - 2.5])


def test_checkpoint_round_trip(tmp_path):
    model = FlowModel.init(2, (5, 3), seed=9)
    path = tmp_path / "ckpt.json"
    model.save(path)
    assert CHECKPOINT_MAGIC in path.read_text()[:100]
    loaded = FlowModel.load(path)
    assert loaded.hidden == (5, 3)
    for name in model.names():
        assert loaded.params[name].tobytes() == model.params[name].tobytes()


def test_checkpoint_magic_checked(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"magic": "OTHER"}')
    with pytest.raises(ValueError, match="CNFTPR1"):
        FlowModel.load(path)


def test_flat_round_trip():
    model = FlowModel.init(2, (3,), seed=0)
    assert model.num_params() == 32
    theta = model.flat()
    np.testing.assert_array_equal(model.with_flat(theta).flat(), theta)


def test_all_parameters_are_trainable_leaves():
    model = FlowModel.init(2, (3, 3), seed=0)
    tape = ad.Tape()
    params = model.bind(tape)
    assert all(p.requires_grad and p.op is None for p in params.values())
    assert model.params[f"W{model.num_layers - 1}"].shape[1] == 2


def test_trace_modes_in_dynamics_agree_for_identity_noise_average(rng):
    # averaging the Hutchinson dynamics over all four sign patterns gives the exact trace
    model = FlowModel.init(2, (8,), seed=1)
    state = np.c_[rng.standard_normal((1, 2)), 0.0]
    exact = make_dynamics(model.params, 2, EXACT)(state, 0.3)[0, 2]
    patterns = [np.array([[a, b]]) for a in (-1.0, 1.0) for b in (-1.0, 1.0)]
    avg = np.mean([make_dynamics(model.params, 2, HUTCHINSON, eps)(state, 0.3)[0, 2] for eps in patterns])
    assert avg == pytest.approx(exact, rel=1e-12)
