import numpy as np
import pytest

from fenode.data import Normalizer, TrajectoryDataset
from fenode.encoder import (Coefficients, EncoderModel, avg_forward, basis_forward, estimate_coefficients_ip,
                            estimate_coefficients_ls, gram_matrix, identify, init_model, integrate_basis,
                            integrate_combined, mean_offdiagonal, predict_delta)
from fenode.errors import ConfigError, NumericError, ShapeError
from fenode.integrate import IntegrationSpec, rk4_backward, rk4_forward
from fenode.nn import ParamVector, mlp_forward, unflatten


def constant_basis_model(vectors, mode="fe_node", control_dim=0):
    """Basis networks whose output is the constant vector ``vectors[i]`` (zero weights, output bias)."""
    a = np.asarray(vectors, dtype=float)
    k, n = a.shape
    m = init_model(mode, n, control_dim, k, (4,), Normalizer.identity(n, control_dim), seed=0)
    flat = np.zeros_like(m.basis)
    for i in range(k):
        unflatten(flat[i], m.sizes)[-1][1][:] = a[i]
    m.basis = flat
    return m


def field_dataset(f, m=50, dt=0.1, n=2, p=0, seed=0):
    """Tuples from a constant field ``f``; inputs random."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, n))
    return TrajectoryDataset(x, rng.normal(size=(m, p)), x + np.asarray(f) * dt, np.full(m, dt))


def random_model(mode="fe_node", k=3, n=2, p=1, seed=0, scale=0.5, hidden_dim=0):
    m = init_model(mode, n, p, k, (6, 6), Normalizer.identity(n, p, hidden_dim), seed=seed, hidden_dim=hidden_dim)
    rng = np.random.default_rng(seed + 100)
    m.basis = m.basis + scale * rng.normal(size=m.basis.shape)
    if m.avg is not None:
        m.avg = m.avg + scale * rng.normal(size=m.avg.shape)
    return m


def random_dataset(m=40, n=2, p=1, seed=1, dt=0.1, hidden=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, n))
    return TrajectoryDataset(x, rng.normal(size=(m, p)), x + 0.1 * rng.normal(size=(m, n)),
                             rng.uniform(0.5 * dt, 1.5 * dt, size=m), "test", hidden or {})


# --- inner-product estimator ---------------------------------------------------

def test_ip_orthonormal_constant_basis_recovers_field():
    model = constant_basis_model([[1, 0], [0, 1]])
    d = field_dataset([2.0, 3.0], dt=0.1)
    # V/m * sum |G_i|^2 = V * dt^2 = 1
    c = estimate_coefficients_ip(model, d, V=100.0)
    np.testing.assert_allclose(c.values, [2.0, 3.0], atol=1e-10)
    np.testing.assert_allclose(predict_delta(model, c, np.array([0.3, -0.4]), np.zeros(0), 0.1), [0.2, 0.3],
                               atol=1e-10)


def test_ip_zero_target_and_doubling():
    model = random_model()
    d = random_dataset()
    zero = TrajectoryDataset(d.states, d.controls, d.states, d.dts)
    assert np.all(estimate_coefficients_ip(model, zero).values == 0)
    c1 = estimate_coefficients_ip(model, d).values
    c2 = estimate_coefficients_ip(model, d.scaled(2.0)).values
    np.testing.assert_allclose(c2, 2 * c1, rtol=1e-12)


def test_ip_linear_in_targets():
    model = random_model(k=4)
    d1, d2 = random_dataset(seed=1), random_dataset(seed=2)
    d2 = TrajectoryDataset(d1.states, d1.controls, d1.states + d2.deltas, d1.dts)
    a, b = 1.5, -0.7
    mix = TrajectoryDataset(d1.states, d1.controls, d1.states + a * d1.deltas + b * d2.deltas, d1.dts)
    c = estimate_coefficients_ip(model, mix).values
    expect = a * estimate_coefficients_ip(model, d1).values + b * estimate_coefficients_ip(model, d2).values
    np.testing.assert_allclose(c, expect, rtol=1e-10, atol=1e-14)


def test_ip_empty_dataset_rejected():
    model = random_model()
    with pytest.raises(ConfigError):
        estimate_coefficients_ip(model, random_dataset().head(0))


# --- least squares ---------------------------------------------------------------

def test_ls_non_orthogonal_constant_basis():
    model = constant_basis_model([[1, 0], [1, 1]])
    c = estimate_coefficients_ls(model, field_dataset([3.0, 5.0]), ridge=0.0)
    np.testing.assert_allclose(c.values, [-2.0, 5.0], atol=1e-10)


@pytest.mark.parametrize("ridge", [0.0, 1e-6, 1.0])
def test_ls_zero_target(ridge):
    model = random_model()
    d = random_dataset()
    zero = TrajectoryDataset(d.states, d.controls, d.states, d.dts)
    np.testing.assert_array_equal(estimate_coefficients_ls(model, zero, ridge).values, np.zeros(3))


def test_ls_equals_ip_when_gram_is_identity():
    model = constant_basis_model([[1, 0], [0, 1]])
    model.volume = 100.0
    d = field_dataset([-1.2, 0.4])
    np.testing.assert_allclose(gram_matrix(model, d), np.eye(2), atol=1e-10)
    np.testing.assert_allclose(estimate_coefficients_ls(model, d, 0.0).values,
                               estimate_coefficients_ip(model, d).values, atol=1e-10)


def test_ls_singular_without_ridge_raises():
    model = constant_basis_model([[1, 0], [1, 0]])
    d = field_dataset([1.0, 0.0])
    with pytest.raises(NumericError, match="ridge"):
        estimate_coefficients_ls(model, d, 0.0)
    estimate_coefficients_ls(model, d, 1e-6)
    with pytest.raises(ConfigError):
        estimate_coefficients_ls(model, d, -1.0)


def test_volume_scaling():
    model = random_model(k=3)
    d = random_dataset()
    s = 7.0
    np.testing.assert_allclose(estimate_coefficients_ip(model, d, V=s).values,
                               s * estimate_coefficients_ip(model, d, V=1.0).values, rtol=1e-12)
    np.testing.assert_allclose(estimate_coefficients_ls(model, d, 0.0, V=s).values,
                               estimate_coefficients_ls(model, d, 0.0, V=1.0).values, rtol=1e-9)


def test_span_recovery_random_model():
    model = random_model(k=3, seed=5)
    rng = np.random.default_rng(6)
    c_star = rng.normal(size=3)
    x, u = rng.normal(size=(200, 2)), rng.normal(size=(200, 1))
    dt = rng.uniform(0.05, 0.15, size=200)
    dx = predict_delta(model, Coefficients(c_star), x, u, dt)
    c = estimate_coefficients_ls(model, TrajectoryDataset(x, u, x + dx, dt), 0.0).values
    assert np.max(np.abs(c - c_star)) < 1e-6


def test_identify_dispatch():
    model = random_model()
    d = random_dataset()
    assert identify(model, d, "inner_product").estimator == "inner_product"
    assert identify(model, d).estimator == "least_squares"
    with pytest.raises(ConfigError):
        identify(model, d, "bayes")


# --- prediction and integration ----------------------------------------------------

def test_zero_coefficients():
    x, u = np.random.default_rng(0).normal(size=(5, 2)), np.ones((5, 1))
    model = random_model()
    assert np.all(predict_delta(model, Coefficients(np.zeros(3)), x, u, 0.1) == 0)
    assert np.all(integrate_combined(model, Coefficients(np.zeros(3)), x, u, IntegrationSpec(0.1, 1)) == 0)
    res = random_model("fe_node_residuals")
    np.testing.assert_array_equal(predict_delta(res, Coefficients(np.zeros(3)), x, u, 0.1),
                                  avg_forward(res, x, u, 0.1))


def test_residual_decomposition():
    model = random_model("fe_node_residuals", k=3)
    rng = np.random.default_rng(2)
    x, u, c = rng.normal(size=(6, 2)), rng.normal(size=(6, 1)), rng.normal(size=3)
    G, _ = basis_forward(model, x, u, 0.1)
    diff = predict_delta(model, Coefficients(c), x, u, 0.1) - predict_delta(model, Coefficients(np.zeros(3)), x, u, 0.1)
    np.testing.assert_allclose(diff, np.tensordot(c, G, axes=(0, 0)), rtol=1e-12, atol=1e-15)


def test_predict_matches_per_basis_sum_in_raw_units():
    norm = Normalizer(np.array([0.5, -1.0]), np.array([2.0, 0.5]), np.array([1.0]), np.array([3.0]))
    model = init_model("fe_node", 2, 1, 3, (5,), norm, seed=3)
    rng = np.random.default_rng(0)
    x, u, c = rng.normal(size=(4, 2)), rng.normal(size=(4, 1)), rng.normal(size=3)
    spec = IntegrationSpec(0.1, 1)
    total = sum(c[i] * integrate_basis(model, i, x, u, spec) for i in range(3))
    np.testing.assert_allclose(predict_delta(model, Coefficients(c), x, u, 0.1), total, rtol=1e-12)


def test_zero_parameter_basis_gives_zero_delta():
    model = random_model()
    model.basis[:] = 0.0
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert np.all(integrate_basis(model, 1, x, np.ones((3, 1)), IntegrationSpec(0.1, 2)) == 0)
    with pytest.raises(ConfigError):
        integrate_basis(model, 3, x, np.ones((3, 1)), IntegrationSpec(0.1, 1))


def test_integrate_basis_gradient_matches_finite_differences():
    model = random_model(k=2)
    x, u = np.array([[0.3, -0.2]]), np.array([[0.5]])
    spec = IntegrationSpec(0.2, 1)
    fld = model.basis_field(i=1)
    delta, tape = rk4_forward(fld, x, u, spec)
    gp, _, _ = rk4_backward(fld, tape, 2 * delta)

    def loss():
        return float(np.sum(integrate_basis(model, 1, x, u, spec) ** 2))
    fd = np.zeros(model.basis.shape[1])
    for j in range(fd.size):
        old = model.basis[1, j]
        model.basis[1, j] = old + 1e-6
        hi = loss()
        model.basis[1, j] = old - 1e-6
        lo = loss()
        model.basis[1, j] = old
        fd[j] = (hi - lo) / 2e-6
    assert np.linalg.norm(gp - fd) < 1e-4 * np.linalg.norm(fd)


def test_short_interval_limit_matches_field():
    model = random_model(k=2)
    x, u = np.array([[0.3, -0.2]]), np.array([[0.5]])
    dt = 1e-4
    g = mlp_forward(model.basis_params(0), np.concatenate([x, u], axis=1))
    np.testing.assert_allclose(integrate_basis(model, 0, x, u, IntegrationSpec(dt, 1)) / dt, g, rtol=1e-3)


def test_combined_equals_per_basis_for_constant_fields():
    a = [[0.5, -1.0], [2.0, 0.25], [-0.3, 0.7]]
    model = constant_basis_model(a)
    c = np.array([1.5, -2.0, 0.5])
    x, u = np.zeros((1, 2)), np.zeros((1, 0))
    spec = IntegrationSpec(0.1, 1)
    per = sum(c[i] * integrate_basis(model, i, x, u, spec) for i in range(3))
    np.testing.assert_allclose(integrate_combined(model, Coefficients(c), x, u, spec), per, rtol=1e-14)
    np.testing.assert_allclose(per[0], (c @ np.array(a)) * 0.1, rtol=1e-14)


def test_fe_direct_evaluates_networks_without_integration():
    model = random_model("fe_direct", k=2)
    x, u = np.array([[0.3, -0.2]]), np.array([[0.5]])
    c = np.array([0.7, -1.1])
    out = predict_delta(model, Coefficients(c), x, u, 0.05)
    inp = np.concatenate([x, u, [[0.05]]], axis=1)
    expect = sum(c[i] * mlp_forward(ParamVector(model.basis[i], model.sizes), inp) for i in range(2))
    np.testing.assert_allclose(out, expect, rtol=1e-13)
    with pytest.raises(ConfigError):
        model.basis_field()


# --- Gram matrix -----------------------------------------------------------------

def test_gram_properties():
    model = random_model(k=4)
    d = random_dataset()
    g = gram_matrix(model, d)
    assert np.array_equal(g, g.T)
    one = random_model(k=1)
    G, _ = basis_forward(one, d.states, d.controls, d.dts)
    np.testing.assert_allclose(gram_matrix(one, d), [[np.sum(G ** 2) / len(d)]], rtol=1e-12)
    ortho = constant_basis_model([[1, 0], [0, 1]])
    np.testing.assert_allclose(gram_matrix(ortho, field_dataset([1, 1]), V=100.0), np.eye(2), atol=1e-10)
    assert mean_offdiagonal(np.eye(3)) == 0.0
    assert mean_offdiagonal(np.array([[4.0, 2.0], [2.0, 1.0]])) == pytest.approx(1.0)


# --- baselines and invariants ------------------------------------------------------

def test_node_baseline_ignores_identification_data():
    model = random_model("node_baseline", k=1)
    c1 = identify(model, random_dataset(seed=1))
    c2 = identify(model, random_dataset(seed=2).scaled(5.0))
    assert np.array_equal(c1.values, c2.values) and np.all(c1.values == 1)
    x, u = np.zeros((1, 2)), np.zeros((1, 1))
    assert np.array_equal(predict_delta(model, c1, x, u, 0.1), predict_delta(model, c2, x, u, 0.1))


def test_oracle_baseline_uses_hidden_parameters():
    model = random_model("oracle_baseline", k=1, hidden_dim=1)
    c1 = identify(model, random_dataset(hidden={"mu": 0.5}))
    c2 = identify(model, random_dataset(hidden={"mu": 2.5}))
    x, u = np.ones((1, 2)), np.zeros((1, 1))
    assert not np.array_equal(predict_delta(model, c1, x, u, 0.1), predict_delta(model, c2, x, u, 0.1))
    with pytest.raises(ConfigError):
        predict_delta(model, Coefficients(np.ones(1)), x, u, 0.1)


def test_model_invariants():
    norm = Normalizer.identity(2)
    good = init_model("fe_node", 2, 0, 3, (4,), norm)
    with pytest.raises(ConfigError):
        EncoderModel("fe_node", 2, 0, (4,), good.basis, norm, avg=np.zeros(22))
    with pytest.raises(ConfigError):
        EncoderModel("fe_node_residuals", 2, 0, (4,), good.basis, norm)
    with pytest.raises(ConfigError):
        EncoderModel("node_baseline", 2, 0, (4,), good.basis, norm)
    with pytest.raises(ShapeError):
        EncoderModel("fe_node", 2, 0, (5,), good.basis, norm)
    with pytest.raises(ConfigError):
        init_model("fe_node", 2, 0, 0, (4,), norm)
    assert init_model("node_baseline", 2, 0, 5, (4,), norm).k == 1


def test_coefficient_validation():
    model = random_model(k=3)
    with pytest.raises(ConfigError):
        predict_delta(model, Coefficients(np.ones(2)), np.zeros(2), np.zeros(1), 0.1)
    with pytest.raises(NumericError):
        Coefficients([1.0, np.nan])
    with pytest.raises(ConfigError):
        predict_delta(model, Coefficients(np.ones(3)), np.zeros(2), np.zeros(1), 0.0)
    with pytest.raises(ShapeError):
        identify(model, random_dataset(n=3))
