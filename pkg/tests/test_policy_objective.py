import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ibrl import nnkit as nn
from ibrl.objective import (IBConfig, gaussian_kl, ib_loss, kl_tensor, kl_to_unit_gaussian, mi_upper_bound,
                            modified_reward, true_mi_discrete)
from ibrl.policy import (SIGMA_MAX, SIGMA_MIN, ActionDistribution, GaussianCode, act, encode, forward_batch,
                         make_bundle, sample_code, value)


@pytest.fixture(params=["grid", "cartpole"])
def bundle(request):
    return make_bundle(request.param, np.random.default_rng(0))


def obs_for(bundle, n, rng):
    x = rng.normal(size=(n,) + bundle.obs_shape)
    return (x > 0.8).astype(float) if bundle.env == "grid" else x


def test_bundle_shapes(bundle):
    rng = np.random.default_rng(1)
    code = encode(bundle, obs_for(bundle, 5, rng))
    assert code.mu.shape == code.sigma.shape == (5, bundle.code_dim)
    assert act(bundle, code.mu).probs.shape == (5, bundle.n_actions)
    assert value(bundle, code.mu).shape == (5,)
    single = encode(bundle, obs_for(bundle, 1, rng)[0])
    assert single.mu.shape == (bundle.code_dim,)


def test_initial_policy_is_near_uniform(bundle):
    code = encode(bundle, obs_for(bundle, 4, np.random.default_rng(2)))
    np.testing.assert_allclose(act(bundle, code.mu).probs, 1.0 / bundle.n_actions, atol=0.05)


def test_sigma_stays_clipped():
    bundle = make_bundle("cartpole", np.random.default_rng(0))
    bundle.logvar_head.layers[0].bias.data[:] = 100.0
    assert np.all(encode(bundle, np.zeros(4)).sigma == SIGMA_MAX)
    bundle.logvar_head.layers[0].bias.data[:] = -100.0
    assert np.all(encode(bundle, np.zeros(4)).sigma == SIGMA_MIN)


def test_deterministic_bundle_gives_mean_codes():
    bundle = make_bundle("cartpole", np.random.default_rng(0), deterministic=True)
    code = encode(bundle, np.ones(4))
    assert code.deterministic
    z = sample_code(code, np.random.default_rng(0))
    np.testing.assert_array_equal(z, code.mu)
    assert bundle.logvar_head is None


def test_wrong_observation_shape_rejected():
    bundle = make_bundle("cartpole", np.random.default_rng(0))
    with pytest.raises(ValueError, match="observation shape"):
        encode(bundle, np.zeros(5))


def test_code_sampling_statistics():
    rng = np.random.default_rng(3)
    mu, sigma = np.array([0.5, -1.0]), np.array([0.3, 2.0])
    draws = np.stack([sample_code(GaussianCode(mu, sigma), rng) for _ in range(20000)])
    assert np.all(np.abs(draws.mean(0) - mu) < 4 * sigma / math.sqrt(20000))
    np.testing.assert_allclose(draws.std(0), sigma, rtol=0.03)


def test_action_sampling_frequencies():
    dist = ActionDistribution.from_logits(np.tile([0.0, 1.0, -1.0, 0.5], (20000, 1)))
    counts = np.bincount(dist.sample(np.random.default_rng(4)), minlength=4) / 20000
    p = dist.probs[0]
    assert np.all(np.abs(counts - p) < 4 * np.sqrt(p * (1 - p) / 20000))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_action_distribution_is_normalized(logits):
    dist = ActionDistribution.from_logits(np.array(logits))
    assert np.all(dist.probs > 0) or max(logits) - min(logits) > 700
    assert abs(dist.probs.sum() - 1) < 1e-12
    assert dist.entropy() >= -1e-12


def test_forward_batch_matches_inference_path(bundle):
    rng = np.random.default_rng(5)
    obs = obs_for(bundle, 3, rng)
    noise = rng.standard_normal((3, bundle.code_dim))
    out = forward_batch(bundle, obs, noise)
    code = encode(bundle, obs)
    np.testing.assert_allclose(out.mu.data, code.mu, atol=1e-12)
    np.testing.assert_allclose(out.z.data, code.mu + code.sigma * noise, atol=1e-12)
    z = code.mu + code.sigma * noise
    np.testing.assert_allclose(np.exp(out.logp_all.data), act(bundle, z).probs, atol=1e-12)
    np.testing.assert_allclose(out.values.data, value(bundle, z), atol=1e-12)


# ---------------------------------------------------------------- objective


def quadrature_kl(mu, sigma):
    total = 0.0
    for m, s in zip(mu, sigma):
        f = lambda z: (math.exp(-0.5 * ((z - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))
                       * (-0.5 * ((z - m) / s) ** 2 - math.log(s) + 0.5 * z * z))
        total += integrate.quad(f, m - 12 * s, m + 12 * s, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return total


def test_kl_matches_quadrature_on_random_codes():
    rng = np.random.default_rng(6)
    for _ in range(20):
        mu, sigma = rng.normal(0, 2, 3), np.exp(rng.uniform(-2, 1.5, 3))
        assert abs(gaussian_kl(mu, sigma) - quadrature_kl(mu, sigma)) < 1e-6


def test_kl_known_values():
    assert gaussian_kl(np.zeros(3), np.ones(3)) == 0.0
    assert gaussian_kl([2.0], [1.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        kl_to_unit_gaussian(GaussianCode(np.zeros(2), None))
    with pytest.raises(ValueError):
        gaussian_kl([0.0], [0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 5)), min_size=1, max_size=5))
def test_kl_nonnegative(pairs):
    mu, sigma = np.array(pairs).T
    assert gaussian_kl(mu, sigma) >= -1e-12


def test_kl_tensor_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    mu = nn.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    sigma = nn.Tensor(np.exp(rng.normal(size=(4, 3))), requires_grad=True)
    np.testing.assert_allclose(kl_tensor(mu, sigma).data, gaussian_kl(mu.data, sigma.data), atol=1e-12)
    assert nn.gradient_check([mu, sigma], lambda: nn.mean(kl_tensor(mu, sigma)), h=1e-6) < 1e-6


def test_mi_bound_mean_matches_per_sample():
    rng = np.random.default_rng(8)
    code = GaussianCode(rng.normal(size=(6, 2)), np.exp(rng.normal(size=(6, 2))))
    est = mi_upper_bound(code)
    assert est.mean_kl == pytest.approx(est.per_sample_kl.mean())
    assert np.all(est.per_sample_kl >= 0)
    with pytest.raises(ValueError):
        mi_upper_bound([])


def test_mi_bound_dominates_exact_mi_on_toy_channel():
    probs, mus, sigmas = np.array([0.3, 0.7]), np.array([-1.0, 1.5]), np.array([0.5, 0.8])
    z = np.linspace(-10, 10, 40001)
    exact = true_mi_discrete(probs, mus, sigmas, z)
    codes = [GaussianCode(np.array([m]), np.array([s])) for m, s in zip(mus, sigmas)]
    assert mi_upper_bound(codes, weights=probs).mean_kl >= exact - 1e-6
    assert 0 < exact < math.log(2)


def test_exact_mi_of_identical_channels_is_zero():
    z = np.linspace(-8, 8, 20001)
    assert abs(true_mi_discrete([0.5, 0.5], [0.0, 0.0], [1.0, 1.0], z)) < 1e-9


def test_exact_mi_rejects_narrow_or_coarse_grid():
    with pytest.raises(ValueError, match="cover"):
        true_mi_discrete([1.0], [0.0], [1.0], np.linspace(-3, 3, 101))
    with pytest.raises(ValueError, match="coarse"):
        true_mi_discrete([0.5, 0.5], [-0.2, 0.3], [0.3, 0.4], np.linspace(-8, 8, 41))


def test_modified_reward_subtracts_penalty():
    assert modified_reward(1.0, 2.0, 0.05) == pytest.approx(0.9)
    assert modified_reward(1.0, 2.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        modified_reward(1.0, -0.1, 0.05)


def test_ib_loss_is_increasing_in_beta():
    losses = [ib_loss(0.3, 1.2, 0.6, 4.0, 0.5, 0.01, b) for b in (0.0, 1e-3, 0.1)]
    assert losses[0] == pytest.approx(0.3 + 0.6 - 0.006)
    assert losses[0] < losses[1] < losses[2]


def test_ib_config_rejects_negative_beta():
    with pytest.raises(ValueError):
        IBConfig(beta=-1.0)
