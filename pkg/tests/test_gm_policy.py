import numpy as np
import pytest
import torch
from scipy import stats

from exceptions import CurvatureCollapse, DegenerateCost, DimensionMismatch
from gm_policy import (
    GaussianMixturePolicy,
    ValueGradients,
    component_hamiltonian,
    component_hamiltonians,
    expected_action_sum_diff,
    expected_squared_norm,
    free_energy,
    log_density,
    mean_action,
    posterior_policy,
    posterior_weights,
    sample_action,
    sample_behavior_policy,
    zero_temperature_action,
    zero_temperature_hamiltonian,
)
from oracles import high_temperature_hamiltonian, mixture_partition_quadrature, partition_quadrature
from tests.helpers import make_spec, scalar_spec


def gradients(grad_x, grad_C, J=0.0):
    return ValueGradients(J=torch.tensor(J), grad_x=torch.as_tensor(np.asarray(grad_x, dtype=np.float64)),
                          grad_C=torch.tensor(float(grad_C)))


class TestBehaviourPolicy:
    def test_symmetric_mixture_has_zero_mean(self):
        policy = GaussianMixturePolicy.constant([0.5, 0.5], [[-0.3], [0.3]], [0.5, 0.5], state_dim=2)
        assert float(mean_action(policy, np.zeros(2))) == pytest.approx(0.0, abs=1e-15)

    def test_single_component_mean(self):
        policy = GaussianMixturePolicy.constant([1.0], [[0.4, -0.2]], [0.3], state_dim=3)
        np.testing.assert_allclose(mean_action(policy, np.ones(3)).numpy(), [0.4, -0.2])

    def test_affine_component_means(self):
        slopes = np.array([[[1.0, 2.0]]])
        policy = GaussianMixturePolicy(weights=[1.0], mean_offsets=[[0.5]], mean_slopes=slopes, stds=[0.1])
        np.testing.assert_allclose(policy.component_means(np.array([0.1, 0.2])).numpy(), [[1.0]])

    def test_sample_mean_matches_mean_action(self, policy_1d):
        n = 200_000
        x = np.full((n, 2), 0.1)
        samples = sample_action(policy_1d, x, np.random.default_rng(0)).numpy()
        mean = float(mean_action(policy_1d, x[0]))
        variance = float(expected_squared_norm(policy_1d, x[0])) - mean ** 2
        assert abs(samples.mean() - mean) < 4 * np.sqrt(variance / n)

    def test_component_frequencies(self):
        policy = GaussianMixturePolicy.constant([0.3, 0.7], [[-10.0], [10.0]], [0.1, 0.1], state_dim=1)
        n = 100_000
        samples = sample_action(policy, np.zeros((n, 1)), np.random.default_rng(5)).numpy()
        assert abs((samples > 0).mean() - 0.7) < 4 * np.sqrt(0.21 / n)

    def test_vanishing_spread_returns_the_mean(self):
        policy = GaussianMixturePolicy.constant([1.0], [[0.25]], [1e-12], state_dim=2)
        samples = sample_action(policy, np.zeros((10, 2)), np.random.default_rng(1)).numpy()
        np.testing.assert_allclose(samples, 0.25, atol=1e-9)

    def test_sampling_is_deterministic_in_the_seed(self, policy_1d):
        x = np.zeros((50, 2))
        first = sample_action(policy_1d, x, np.random.default_rng(9)).numpy()
        second = sample_action(policy_1d, x, np.random.default_rng(9)).numpy()
        np.testing.assert_array_equal(first, second)

    def test_log_density_matches_scipy(self, policy_1d):
        a = np.linspace(-2, 2, 9)[:, None]
        expected = np.log(0.4 * stats.norm.pdf(a[:, 0], -0.3, 0.5) + 0.6 * stats.norm.pdf(a[:, 0], 0.25, 0.6))
        np.testing.assert_allclose(log_density(policy_1d, np.zeros((9, 2)), a).numpy(), expected, rtol=1e-12)

    def test_expected_squared_norm(self, policy_1d):
        expected = 0.4 * (0.09 + 0.25) + 0.6 * (0.0625 + 0.36)
        assert float(expected_squared_norm(policy_1d, np.zeros(2))) == pytest.approx(expected, rel=1e-14)

    def test_sampled_behaviour_policy_ranges(self):
        policy = sample_behavior_policy(action_dim=5, state_dim=10, n_components=3, seed=4)
        assert policy.n_components == 3 and policy.action_dim == 5 and policy.state_dim == 10
        assert np.all((policy.mean_offsets >= -0.5) & (policy.mean_offsets <= 0.5))
        assert np.all((policy.stds ** 2 >= 0.2) & (policy.stds ** 2 <= 0.4))
        np.testing.assert_allclose(policy.weights, 1 / 3)

    def test_invalid_mixtures(self):
        with pytest.raises(ValueError):
            GaussianMixturePolicy.constant([0.6, 0.6], [[0.0], [0.0]], [1.0, 1.0], state_dim=1)
        with pytest.raises(ValueError):
            GaussianMixturePolicy.constant([1.0], [[0.0]], [0.0], state_dim=1)
        with pytest.raises(DimensionMismatch):
            GaussianMixturePolicy.constant([0.5, 0.5], [[0.0]], [1.0, 1.0], state_dim=1)


class TestPosterior:
    @pytest.mark.parametrize('beta', [0.5, 1.0, 5.0])
    def test_zero_gradients_leave_the_prior_unchanged(self, policy_1d, beta):
        spec = make_spec(inverse_temperature=beta)
        x = torch.tensor([0.1, 0.12])
        posterior = posterior_policy(policy_1d, gradients([0.0, 0.0], 0.0), x, spec)
        np.testing.assert_allclose(posterior.weights.numpy(), policy_1d.weights, atol=1e-15)
        np.testing.assert_allclose(posterior.means.numpy(), policy_1d.mean_offsets, atol=1e-15)
        np.testing.assert_allclose(posterior.covariances.numpy(), policy_1d.stds ** 2, atol=1e-15)

    def test_hamiltonians_match_quadrature(self, policy_1d, tiny_spec):
        x = torch.tensor([0.3, -0.2])
        for grad_x, grad_C in [([0.5, -0.3], 0.8), ([-1.0, 0.2], 0.1), ([0.0, 0.0], 1.5)]:
            vg = gradients(grad_x, grad_C)
            for k in range(2):
                closed = float(component_hamiltonian(policy_1d, k, vg, x, tiny_spec))
                reference = partition_quadrature(policy_1d, k, vg, x, tiny_spec)
                assert closed == pytest.approx(reference, rel=1e-6, abs=1e-9)

    def test_weights_lie_on_the_simplex(self, policy_1d, tiny_spec):
        rng = np.random.default_rng(7)
        x = torch.as_tensor(rng.uniform(-0.5, 0.5, size=(64, 2)))
        vg = ValueGradients(J=torch.zeros(64), grad_x=torch.as_tensor(rng.normal(size=(64, 2))),
                            grad_C=torch.as_tensor(rng.uniform(0, 2, size=64)))
        weights = posterior_policy(policy_1d, vg, x, tiny_spec).weights.numpy()
        assert np.all(weights >= 0)
        np.testing.assert_allclose(weights.sum(-1), 1.0, atol=1e-12)

    def test_positive_cost_gradient_shrinks_covariances(self, policy_1d, tiny_spec):
        posterior = posterior_policy(policy_1d, gradients([0.2, 0.1], 0.7), torch.tensor([0.4, 0.3]), tiny_spec)
        assert np.all(posterior.covariances.numpy() < policy_1d.stds ** 2)

    def test_free_energy_shift(self, policy_1d, tiny_spec):
        x = torch.tensor([0.2, 0.1])
        vg = gradients([0.3, 0.4], 0.5)
        h, _ = component_hamiltonians(policy_1d, vg, x, tiny_spec)
        value, events = free_energy(policy_1d, vg, x, tiny_spec)
        beta = tiny_spec.inverse_temperature
        expected = -torch.logsumexp(torch.log(torch.tensor(policy_1d.weights)) - beta * h, -1) / beta
        assert events == 0
        assert float(value) == pytest.approx(float(expected), rel=1e-14)

    @pytest.mark.parametrize('action_dim', [1, 2])
    def test_free_energy_matches_the_integrated_mixture(self, action_dim):
        spec = make_spec(2, action_dim, inverse_temperature=1.5)
        rng = np.random.default_rng(action_dim)
        policy = GaussianMixturePolicy(weights=[0.2, 0.5, 0.3],
                                       mean_offsets=rng.uniform(-0.5, 0.5, size=(3, action_dim)),
                                       mean_slopes=rng.normal(scale=0.3, size=(3, action_dim, 2)),
                                       stds=[0.4, 0.55, 0.6])
        for _ in range(3):
            x = torch.as_tensor(rng.uniform(-0.4, 0.4, size=2))
            vg = gradients(rng.normal(size=2), rng.uniform(0.0, 2.0))
            value, _ = free_energy(policy, vg, x, spec)
            assert float(value) == pytest.approx(mixture_partition_quadrature(policy, vg, x, spec), abs=1e-6)

    def test_weights_invariant_to_a_common_shift(self):
        log_w = torch.log(torch.tensor([0.2, 0.3, 0.5]))
        h = torch.tensor([120.0, -340.0, 15.0])
        np.testing.assert_allclose(posterior_weights(log_w, h, 1.0).numpy(),
                                   posterior_weights(log_w, h + 900.0, 1.0).numpy(), atol=1e-12)

    def test_sum_and_difference_of_mean_actions(self, policy_1d, tiny_spec):
        x = torch.tensor([0.1, 0.1])
        plus, minus = expected_action_sum_diff(policy_1d, gradients([0.0, 0.0], 0.0), x, tiny_spec)
        prior = float(mean_action(policy_1d, x))
        assert float(minus) == pytest.approx(0.0, abs=1e-15)
        assert float(plus) == pytest.approx(2 * prior, rel=1e-14)

    def test_collapse_raises_unless_clamped(self):
        spec = scalar_spec()
        policy = GaussianMixturePolicy.constant([0.5, 0.5], [[0.0], [0.1]], [0.5, 0.5], state_dim=1)
        x, vg = torch.tensor([1.0]), gradients([0.1], -10.0)
        with pytest.raises(CurvatureCollapse):
            posterior_policy(policy, vg, x, spec)
        h, events = component_hamiltonians(policy, vg, x, spec, clamp=True)
        assert events == 2
        assert bool(torch.isfinite(h).all())


class TestTemperatureLimits:
    def test_zero_temperature_action_value(self):
        spec = scalar_spec(cost_action_coeff=2.0)
        action = zero_temperature_action(gradients([4.0], 1.0), torch.tensor([1.0]), spec)
        assert float(action) == pytest.approx(-2.0)

    def test_zero_temperature_action_without_state_gradient(self):
        spec = scalar_spec()
        assert float(zero_temperature_action(gradients([0.0], 1.0), torch.tensor([0.5]), spec)) == 0.0

    def test_degenerate_cost_is_reported(self):
        spec = scalar_spec()
        with pytest.raises(DegenerateCost):
            zero_temperature_action(gradients([1.0], 1.0), torch.tensor([0.0]), spec)
        with pytest.raises(DegenerateCost):
            zero_temperature_action(gradients([1.0], 0.0), torch.tensor([0.5]), spec)

    def test_cold_posterior_mean_approaches_the_deterministic_action(self):
        spec = scalar_spec(inverse_temperature=1e8)
        policy = GaussianMixturePolicy.constant([0.4, 0.6], [[-0.3], [0.25]], [0.5, 0.6], state_dim=1)
        x, vg = torch.tensor([0.8]), gradients([0.6], 1.2)
        posterior = posterior_policy(policy, vg, x, spec)
        assert float(posterior.mean()) == pytest.approx(float(zero_temperature_action(vg, x, spec)), abs=1e-4)

    def test_cold_hamiltonian_approaches_the_limit(self):
        spec = scalar_spec(inverse_temperature=1e8)
        policy = GaussianMixturePolicy.constant([0.4, 0.6], [[-0.3], [0.25]], [0.5, 0.6], state_dim=1)
        x, vg = torch.tensor([0.8]), gradients([0.6], 1.2)
        h, _ = component_hamiltonians(policy, vg, x, spec)
        limit = float(zero_temperature_hamiltonian(vg, x, spec))
        np.testing.assert_allclose(h.numpy(), limit, atol=1e-5)

    def test_hot_expansion_is_second_order_accurate(self, policy_1d):
        x, vg = torch.tensor([0.4, 0.3]), gradients([0.5, -0.2], 0.9)

        def error(beta):
            spec = make_spec(inverse_temperature=beta)
            exact = float(component_hamiltonian(policy_1d, 0, vg, x, spec))
            return abs(exact - high_temperature_hamiltonian(policy_1d, 0, vg, x, spec))

        assert error(1e-3) < 1e-4
        assert error(1e-3) < error(1e-2)
