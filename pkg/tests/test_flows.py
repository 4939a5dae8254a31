import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfmflow import autodiff as ad
from lfmflow import flows, models
from lfmflow.errors import ConfigError, DataError, ShapeError
from lfmflow.flows import FlowConfig, Observations


def perturbed_stack(d, T, n_theta=0, seed=0, **cfg):
    """A stack whose output layers are randomised so the flow is far from identity."""
    rng = np.random.default_rng(seed)
    stack = flows.init_flow_stack(d, T, n_theta, FlowConfig(channels=6, **cfg), rng)
    for k, v in stack.params.items():
        if k.endswith("out.W"):
            stack.params[k] = 0.3 * rng.normal(size=v.shape)
    return stack


def blank_features(stack):
    return flows.FeatureTensor(np.zeros((stack.t_flat, flows.N_FEATURES)), np.zeros(stack.t_flat))


def flat_output(stack, eps, theta_u=None, features=None):
    features = features if features is not None else blank_features(stack)
    f, log_q = flows.flow_forward(stack, eps[None], theta_u, features)
    return f[0].reshape(-1), log_q[0]


def numeric_jacobian(fn, x, h=1e-6):
    J = np.zeros((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return J


# -- layout -------------------------------------------------------------------


def test_flatten_is_time_major():
    state = np.array([[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(flows.flatten(state), [1, 4, 2, 5, 3, 6])
    assert flows.element_position(5, 2) == (2, 1)
    assert flows.element_position(4, 3) == (1, 1)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 6), T=st.integers(1, 12), seed=st.integers(0, 1000))
def test_flatten_roundtrip(d, T, seed):
    state = np.random.default_rng(seed).normal(size=(d, T))
    v = flows.flatten(state)
    np.testing.assert_array_equal(flows.unflatten(v, d), state)
    for i in range(v.size):
        k, dim = flows.element_position(i, d)
        assert v[i] == state[dim, k]


def test_unflatten_rejects_bad_length():
    with pytest.raises(ShapeError):
        flows.unflatten(np.zeros(7), 3)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 6), T=st.integers(1, 8))
def test_each_element_updated_twice_in_default_stack(d, T):
    idx = np.arange(d * T)
    counts = sum(flows.dimension_mask(l, idx, d) for l in range(1, 2 * d + 1))
    np.testing.assert_array_equal(counts, 2)


def test_mask_selects_one_dimension():
    idx = np.arange(9)
    np.testing.assert_array_equal(flows.dimension_mask(1, idx, 3), [0, 1, 0, 0, 1, 0, 0, 1, 0])
    np.testing.assert_array_equal(flows.dimension_mask(3, idx, 3), [1, 0, 0, 1, 0, 0, 1, 0, 0])
    with pytest.raises(ConfigError):
        flows.dimension_mask(0, idx, 3)


# -- features -----------------------------------------------------------------


def test_features_single_observation():
    model = models.make_model("matern-gp", gp_order=1)
    mesh = np.arange(5.0)
    feats = flows.build_features(model, mesh, Observations([2.0], [[1.5]], [[1.0]]))
    np.testing.assert_allclose(feats.raw_dtau, [2, 1, 0, 0, 0])
    np.testing.assert_allclose(feats.values[:, 2], [1.5, 1.5, 1.5, 0, 0])
    np.testing.assert_allclose(feats.obs_mask, [0, 0, 1, 0, 0])
    assert feats.values[:, 0].mean() == pytest.approx(0.0)
    assert feats.values[:, 0].std() == pytest.approx(1.0)


def test_features_put_values_on_observed_dims_only():
    model = models.make_model("toy")
    mesh = np.linspace(0, 1, 3)
    feats = flows.build_features(model, mesh, Observations([0.5], [[0.7]], [[1.0]]))
    y = feats.values[:, 2].reshape(3, 3)
    np.testing.assert_allclose(y[:, 0], [0.7, 0.7, 0.0])
    np.testing.assert_allclose(y[:, 1:], 0.0)
    np.testing.assert_allclose(feats.obs_mask.reshape(3, 3)[1], [1, 0, 0])


def test_masked_out_observation_is_not_a_feature():
    model = models.make_model("matern-gp", gp_order=1)
    feats = flows.build_features(model, np.arange(3.0), Observations([1.0], [[4.0]], [[0.0]]))
    np.testing.assert_allclose(feats.values[:, 2:], 0.0)


def test_off_mesh_observation_rejected():
    model = models.make_model("matern-gp", gp_order=1)
    with pytest.raises(DataError, match="not on the mesh"):
        flows.build_features(model, np.arange(5.0), Observations([2.5], [[1.0]], [[1.0]]))


# -- flow ---------------------------------------------------------------------


def test_identity_at_initialisation():
    stack = flows.init_flow_stack(2, 5, 1, FlowConfig(channels=4), np.random.default_rng(0))
    eps = np.random.default_rng(1).normal(size=(3, 10))
    f, log_q = flows.flow_forward(stack, eps, np.zeros((3, 1)), blank_features(stack))
    np.testing.assert_allclose(f.reshape(3, -1), eps, atol=1e-12)
    base = -0.5 * (eps ** 2).sum(1) - 5 * np.log(2 * np.pi)
    np.testing.assert_allclose(log_q, base, atol=1e-10)


@pytest.mark.parametrize("d,T,bijector", [(1, 6, None), (2, 4, None), (3, 3, ["identity", "softplus", "identity"])])
def test_jacobian_lower_triangular_and_density(d, T, bijector):
    stack = perturbed_stack(d, T, n_theta=2, seed=d, bijector=bijector, batchnorm=False)
    rng = np.random.default_rng(10 + d)
    eps = rng.normal(size=d * T)
    theta_u = rng.normal(size=(1, 2))
    feats = flows.FeatureTensor(rng.normal(size=(d * T, flows.N_FEATURES)), np.zeros(d * T))
    J = numeric_jacobian(lambda e: flat_output(stack, e, theta_u, feats)[0], eps)
    assert np.abs(np.triu(J, 1)).max() < 1e-8
    assert np.all(np.abs(np.diag(J)) > 0)
    _, log_q = flat_output(stack, eps, theta_u, feats)
    base = -0.5 * eps @ eps - 0.5 * eps.size * np.log(2 * np.pi)
    assert log_q == pytest.approx(base - np.log(np.abs(np.diag(J))).sum(), abs=1e-6)


def test_jacobian_triangular_with_batchnorm_in_eval_mode():
    stack = perturbed_stack(2, 5, seed=3)
    eps = np.random.default_rng(4).normal(size=10)
    J = numeric_jacobian(lambda e: flat_output(stack, e)[0], eps)
    assert np.abs(np.triu(J, 1)).max() < 1e-8


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), j=st.integers(0, 11))
def test_perturbing_one_base_element_leaves_earlier_outputs_unchanged(seed, j):
    stack = perturbed_stack(3, 4, seed=seed % 7, batchnorm=False)
    eps = np.random.default_rng(seed).normal(size=12)
    f0, _ = flat_output(stack, eps)
    eps2 = eps.copy()
    eps2[j] += 1.0
    f1, _ = flat_output(stack, eps2)
    np.testing.assert_array_equal(f0[:j], f1[:j])


def test_softplus_bijector_makes_dimension_positive():
    stack = perturbed_stack(2, 6, bijector=["softplus", "identity"], batchnorm=False)
    eps = 3 * np.random.default_rng(0).normal(size=(20, 12))
    f, _ = flows.flow_forward(stack, eps, None, blank_features(stack))
    assert np.all(f[:, :, 0] > 0)
    assert np.any(f[:, :, 1] < 0)


def test_apply_bijector():
    z = np.array([-1.0, 0.0, 2.0])
    y, ld = flows.apply_bijector("softplus", z)
    np.testing.assert_allclose(y, np.log1p(np.exp(z)))
    assert ld == pytest.approx(np.sum(np.log(1 / (1 + np.exp(-z)))))
    assert flows.apply_bijector("identity", z)[1] == 0.0
    with pytest.raises(ConfigError):
        flows.apply_bijector("exp", z)


def test_bad_configuration_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        flows.init_flow_stack(2, 3, 0, FlowConfig(bijector=["softplus"]), rng)
    with pytest.raises(ConfigError):
        flows.init_flow_stack(2, 3, 0, FlowConfig(bijector=["softplus", "exp"]), rng)
    with pytest.raises(ConfigError):
        flows.init_flow_stack(2, 3, 0, FlowConfig(receptive_field=0), rng)


def test_wrong_base_length_rejected():
    stack = perturbed_stack(2, 3)
    with pytest.raises(ShapeError):
        flows.flow_forward(stack, np.zeros((1, 5)), None, blank_features(stack))


def test_default_depth_and_width():
    stack = flows.init_flow_stack(3, 4, 0, FlowConfig(), np.random.default_rng(0))
    assert stack.n_layers == 6
    assert stack.kernel_width == 9
    assert stack.params["l1.z.W"].shape == (9, 1, 32)


def test_initialisation_is_deterministic():
    a = flows.init_flow_stack(2, 4, 1, FlowConfig(), np.random.default_rng(7))
    b = flows.init_flow_stack(2, 4, 1, FlowConfig(), np.random.default_rng(7))
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_gradient_reaches_every_parameter():
    stack = perturbed_stack(2, 4, n_theta=1, batchnorm=True)
    tr = ad.Trace()
    params = {k: tr.leaf(v, name=k) for k, v in stack.params.items()}
    eps = np.random.default_rng(0).normal(size=(4, 8))
    theta_u = np.random.default_rng(1).normal(size=(4, 1))
    f, log_q = flows.flow_forward(stack, eps, theta_u, blank_features(stack), params, mode="train")
    loss = ad.sum_(log_q) + ad.sum_(ad.square(f))
    ad.backward(loss)
    for k, p in params.items():
        if k.endswith("out.W") or k.endswith("out.b"):
            assert np.any(p.grad != 0), k
