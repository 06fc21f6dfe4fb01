import numpy as np
import pytest

from fenode.data import TrajectoryDataset
from fenode.errors import ConfigError
from fenode.integrate import IntegrationSpec, rk4_delta
from fenode.systems import (GRAVITY, GenConfig, Quad2DField, fit_normalizer, generate_datasets, make_family,
                            quad2d_field, vdp_field)


def test_vdp_examples():
    np.testing.assert_array_equal(vdp_field(1.7)(np.array([1.0, 0.0]), None), [0.0, -1.0])
    np.testing.assert_array_equal(vdp_field(2.0)(np.array([0.0, 1.0]), None), [1.0, 2.0])


def test_vdp_mu_zero_conserves_radius():
    f = vdp_field(0.0)
    x = np.array([1.0, 0.5])
    r0 = x @ x
    for _ in range(1000):
        x = x + rk4_delta(f, x, np.zeros(0), IntegrationSpec(0.01, 10))
    assert abs(x @ x - r0) < 1e-6


def test_vdp_vjp_matches_finite_differences():
    f = vdp_field(1.3)
    x = np.array([[0.4, -0.7]])
    g = np.array([[0.3, 1.1]])
    gx, _ = f.vjp(x, None, g)
    fd = [(g * (f(x + e, None) - f(x - e, None))).sum() / 2e-6 for e in 1e-6 * np.eye(2)[:, None]]
    np.testing.assert_allclose(gx[0], fd, rtol=1e-7)


def test_quad_hover_free_fall_and_torque_sign():
    m = 0.8
    f = quad2d_field(m)
    x = np.zeros(6)
    np.testing.assert_allclose(f(x, np.array([m * GRAVITY / 2] * 2)), np.zeros(6), atol=1e-15)
    assert f(x, np.zeros(2))[4] == -GRAVITY
    assert f(x, np.array([3.0, 4.0]))[5] > 0


def test_quad_thrust_clamp_and_vjp():
    f = Quad2DField(1.2)
    np.testing.assert_array_equal(f(np.zeros(6), np.array([-1.0, 99.0])), f(np.zeros(6), np.array([0.0, 15.0])))
    rng = np.random.default_rng(0)
    x, u, g = rng.normal(size=(3, 6)), rng.uniform(1, 8, size=(3, 2)), rng.normal(size=(3, 6))
    gx, gu = f.vjp(x, u, g)
    for arr, grad, other in ((x, gx, u), (u, gu, x)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            e = np.zeros_like(arr)
            e[idx] = 1e-6
            hi = f(x + e, u) if arr is x else f(x, u + e)
            lo = f(x - e, u) if arr is x else f(x, u - e)
            fd[idx] = (g * (hi - lo)).sum() / 2e-6
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)


def test_quad_zero_thrust_falls_monotonically():
    d = generate_datasets(make_family("quad2d"), GenConfig(n_datasets=1, steps=50, dt=0.05, policy="random_uniform",
                                                           u_low=0.0, u_high=1e-12, init_low=(0,) * 6,
                                                           init_high=(0,) * 6))[0]
    assert np.all(np.diff(d.next_states[:, 1]) < 0)


def test_fencepost_chaining_and_hidden_recorded():
    ds = generate_datasets(make_family("van_der_pol"), GenConfig(n_datasets=3, steps=100, seed=4))
    for d in ds:
        assert len(d) == 99 and d.is_chained()
        assert 0.1 <= d.hidden["mu"] <= 3.0
    assert len({d.hidden["mu"] for d in ds}) == 3


def test_generation_is_deterministic_and_prefix_stable():
    fam = make_family("van_der_pol")
    a = generate_datasets(fam, GenConfig(n_datasets=4, steps=30, seed=9))
    b = generate_datasets(fam, GenConfig(n_datasets=4, steps=30, seed=9))
    c = generate_datasets(fam, GenConfig(n_datasets=2, steps=30, seed=9))
    for x, y in zip(a, b):
        assert np.array_equal(x.states, y.states) and x.hidden == y.hidden
    for x, y in zip(a, c):
        assert np.array_equal(x.next_states, y.next_states)


def test_generated_deltas_match_finer_integration():
    d = generate_datasets(make_family("van_der_pol"),
                          GenConfig(n_datasets=1, steps=200, dt=0.01, substeps=10, param_values=[1.0]))[0]
    fine = rk4_delta(vdp_field(1.0), d.states, np.zeros((len(d), 0)), IntegrationSpec(0.01, 100))
    assert np.max(np.abs(fine - d.deltas)) < 1e-7


def test_dt_jitter_irregular_and_positive():
    d = generate_datasets(make_family("van_der_pol"), GenConfig(n_datasets=1, steps=50, dt_jitter=0.5))[0]
    assert np.all(d.dts > 0) and np.unique(d.dts).size > 1


def test_pd_policy_keeps_quad_data_bounded():
    ds = generate_datasets(make_family("quad2d"), GenConfig(n_datasets=8, steps=400, dt=0.05, policy="pd_waypoint"))
    for d in ds:
        assert len(d) == 399
        assert np.all(np.abs(d.states[:, :2]) < 5) and np.all(np.abs(d.states[:, 2]) < 1.0)


@pytest.mark.parametrize("kwargs", [dict(steps=1), dict(dt=0.0), dict(substeps=2), dict(policy="bogus"),
                                    dict(n_datasets=2, param_values=[1.0])])
def test_gen_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        GenConfig(**kwargs)


def test_family_validation():
    with pytest.raises(ConfigError):
        make_family("van_der_pol", 2.0, 1.0)
    with pytest.raises(ConfigError):
        make_family("pendulum")
    with pytest.raises(ConfigError):
        generate_datasets(make_family("quad2d"), GenConfig(policy="none"))


def _dataset(states):
    states = np.asarray(states, dtype=float)
    return TrajectoryDataset(states, np.zeros((len(states), 0)), states, np.ones(len(states)))


def test_normalizer_constant_and_two_point():
    n = fit_normalizer([_dataset([[2.0, 5.0]] * 4)])
    np.testing.assert_array_equal(n.state_mean, [2.0, 5.0])
    np.testing.assert_array_equal(n.state_std, [1e-8, 1e-8])
    n = fit_normalizer([_dataset([[-1.0, 1.0], [1.0, -1.0]])])
    np.testing.assert_array_equal(n.state_mean, [0.0, 0.0])
    np.testing.assert_array_equal(n.state_std, [1.0, 1.0])


def test_rate_normalizer_scales_deltas_and_keeps_inputs_standard():
    ds = generate_datasets(make_family("quad2d"), GenConfig(n_datasets=3, steps=100, dt=0.05, policy="pd_waypoint"))
    state = fit_normalizer(ds)
    rate = fit_normalizer(ds, scale="rate")
    rates = np.concatenate([rate.deltas(d.deltas) / d.dts[:, None] for d in ds])
    np.testing.assert_allclose(rates.std(0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(rate.state_std / rate.input_gain, state.state_std, rtol=1e-12)
    np.testing.assert_array_equal(state.input_gain, np.ones(6))
    with pytest.raises(ConfigError):
        fit_normalizer(ds, scale="minmax")


def test_normalizer_standardizes_fit_set():
    ds = generate_datasets(make_family("van_der_pol"), GenConfig(n_datasets=3, steps=200))
    n = fit_normalizer(ds)
    z = np.concatenate([n.states(d.states) for d in ds])
    assert np.all(np.abs(z.mean(0)) < 1e-10) and np.all(np.abs(z.std(0) - 1) < 1e-10)
