import json

import numpy as np
import pandas as pd
import pytest
import torch
from scipy import integrate, special, stats

from evaluator import (
    ReturnDistribution,
    compare_policies,
    default_start,
    estimate_regularized_cost,
    estimate_return_distribution,
    parse_grid,
    policy_slice_export,
    sampled_kl_divergence,
    write_comparison,
    write_return_distribution,
)
from exceptions import DimensionMismatch
from gm_policy import GaussianMixturePolicy, PosteriorPolicy
from models import ExtendedState
from oracles import gaussian_kl_closed_form
from tests.helpers import constant_net, linear_net, make_spec


class TestReturnDistribution:
    def test_summary(self):
        distribution = ReturnDistribution(samples=np.arange(101, dtype=float))
        summary = distribution.summary()
        assert summary['mean'] == 50.0
        assert summary['q05'] == pytest.approx(5.0) and summary['q50'] == 50.0 and summary['q95'] == 95.0
        assert summary['standard_error'] == pytest.approx(np.sqrt(distribution.variance / 101))
        values = [summary[key] for key in ('q05', 'q25', 'q50', 'q75', 'q95')]
        assert values == sorted(values)

    def test_single_sample_has_no_spread(self):
        distribution = ReturnDistribution(samples=[2.0])
        assert distribution.variance == 0.0 and distribution.standard_error == 0.0

    def test_costless_model_returns_zero(self, policy_1d):
        spec = make_spec(cost_state_coeff=0.0, cost_action_coeff=0.0)
        distribution = estimate_return_distribution(spec, policy_1d, default_start(spec), 50, seed=0)
        np.testing.assert_array_equal(distribution.samples, 0.0)

    def test_near_deterministic_model_has_no_spread(self):
        spec = make_spec(1, 1, volatility=np.array([1e-12]))
        policy = GaussianMixturePolicy.constant([1.0], [[0.2]], [0.4], state_dim=1)
        distribution = estimate_return_distribution(spec, policy, default_start(spec), 100, seed=0)
        assert distribution.variance < 1e-20

    def test_matches_the_moment_integral(self):
        # c1 = 0 and a state-independent drift make x Gaussian with known moments
        mu, sigma, x0, horizon, n_steps = 0.1, 0.1, 0.1, 1.0, 40
        spec = make_spec(1, 1, drift_const_offset=np.array([mu]), drift_const_linear=np.zeros((1, 1)),
                         drift_action_offset=np.zeros((1, 1)), drift_action_linear=np.zeros((1, 1)),
                         volatility=np.array([sigma]), cost_action_coeff=0.0, discount_rate=0.0,
                         horizon=horizon, n_steps=n_steps)
        policy = GaussianMixturePolicy.constant([1.0], [[0.0]], [0.5], state_dim=1)
        start = ExtendedState(x=[x0])
        distribution = estimate_return_distribution(spec, policy, start, 5000, seed=3)

        def second_moment(t):
            return (x0 + mu * t) ** 2 + sigma ** 2 * t

        grid = spec.time_grid[:-1]
        discrete = float(sum(second_moment(t) for t in grid) * spec.dt)
        continuous, _ = integrate.quad(second_moment, 0.0, horizon)
        assert abs(distribution.mean - discrete) < 4 * distribution.standard_error
        assert abs(discrete - continuous) < 1e-3

    def test_independent_seeds_agree(self, tiny_spec, policy_1d):
        start = default_start(tiny_spec)
        first = estimate_return_distribution(tiny_spec, policy_1d, start, 2000, seed=1)
        second = estimate_return_distribution(tiny_spec, policy_1d, start, 2000, seed=2)
        assert abs(first.mean - second.mean) < 4 * np.hypot(first.standard_error, second.standard_error)

    def test_mid_horizon_start(self, tiny_spec, policy_1d):
        start = ExtendedState(x=[0.1, 0.1], C=0.5, t=0.1)
        distribution = estimate_return_distribution(tiny_spec, policy_1d, start, 20, seed=0)
        assert np.all(distribution.samples > 0.5)


class TestRegularizedCost:
    def test_behaviour_policy_pays_no_divergence(self, tiny_spec, policy_1d):
        cost = estimate_regularized_cost(tiny_spec, policy_1d, policy_1d, default_start(tiny_spec), 200, seed=0)
        assert cost.kl_term == 0.0
        assert cost.total == pytest.approx(cost.expected_utility)

    def test_zero_value_network_pays_no_divergence(self, tiny_spec, policy_1d):
        cost = estimate_regularized_cost(tiny_spec, policy_1d, constant_net(2), default_start(tiny_spec), 200, seed=0)
        assert abs(cost.kl_term) < 1e-12

    def test_other_mixture_pays_its_divergence(self, tiny_spec, policy_1d):
        other = GaussianMixturePolicy.constant([1.0], [[2.0]], [0.1], state_dim=2)
        cost = estimate_regularized_cost(tiny_spec, policy_1d, other, ExtendedState(x=[0.1, 0.1]), 200, seed=0)

        def integrand(a):
            log_p = stats.norm.logpdf(a, 2.0, 0.1)
            log_q = special.logsumexp(stats.norm.logpdf(a, [-0.3, 0.25], [0.5, 0.6]), b=[0.4, 0.6])
            return np.exp(log_p) * (log_p - log_q)

        divergence, _ = integrate.quad(integrand, 0.5, 3.5, epsabs=1e-12, limit=200)
        times = tiny_spec.time_grid[:-1]
        expected = divergence * np.exp(-tiny_spec.discount_rate * times).sum() * tiny_spec.dt \
            / tiny_spec.inverse_temperature
        assert cost.kl_term > 0
        assert cost.total == pytest.approx(cost.expected_utility + cost.kl_term)
        assert abs(cost.kl_term - expected) < 5 * cost.kl_term_se + 1e-3 * expected

    @pytest.mark.parametrize('weights', [[0.4, -0.3, 0.8, 0.1], [-1.0, 0.5, -0.5, 0.0], [2.0, 1.0, 0.0, 0.3]])
    def test_divergence_is_non_negative_for_tilted_policies(self, tiny_spec, policy_1d, weights):
        net = linear_net(2, weights, bias=0.2)
        cost = estimate_regularized_cost(tiny_spec, policy_1d, net, default_start(tiny_spec), 300, seed=2)
        assert cost.kl_term >= -2 * cost.kl_term_se

    def test_single_gaussian_divergence_matches_closed_form(self):
        prior = GaussianMixturePolicy.constant([1.0], [[0.1, -0.2]], [0.5], state_dim=1)
        posterior = PosteriorPolicy(weights=torch.tensor([1.0]), means=torch.tensor([[0.3, 0.1]]),
                                    covariances=torch.tensor([0.16]), x=torch.tensor([0.2]))
        estimate, se = sampled_kl_divergence(posterior, prior, torch.tensor([0.2]), 20_000,
                                             np.random.default_rng(0))
        expected = gaussian_kl_closed_form([0.3, 0.1], 0.16, [0.1, -0.2], 0.25)
        assert abs(float(estimate) - expected) < 4 * float(se)


class TestComparison:
    def test_zero_value_network_changes_nothing(self, tiny_spec, policy_1d, tmp_path):
        comparison = compare_policies(tiny_spec, policy_1d, constant_net(2), default_start(tiny_spec), 300, seed=4)
        behaviour, optimal = comparison['_distributions']['behavior'], comparison['_distributions']['optimal']
        np.testing.assert_allclose(optimal.samples, behaviour.samples, atol=1e-12)
        assert abs(comparison['improvement']['difference']) < 1e-10
        path = write_comparison(comparison, tmp_path / 'comparison.json')
        data = json.loads(path.read_text())
        assert '_distributions' not in data
        assert set(data['improvement']) == {'difference', 'combined_standard_error', 'z_score', 'p_value'}

    def test_distribution_files(self, tmp_path):
        distribution = ReturnDistribution(samples=[0.1, 0.2, 0.4])
        write_return_distribution(distribution, tmp_path / 'r.csv', tmp_path / 'r.json')
        np.testing.assert_allclose(pd.read_csv(tmp_path / 'r.csv')['sample'], [0.1, 0.2, 0.4])
        assert json.loads((tmp_path / 'r.json').read_text())['n_samples'] == 3


class TestPolicySlice:
    def test_zero_value_network_gives_the_prior(self, tiny_spec, policy_1d):
        table = policy_slice_export(constant_net(2), policy_1d, tiny_spec, 0, np.linspace(-0.5, 0.5, 5),
                                    default_start(tiny_spec))
        assert list(table.columns) == ['sweep_value', 'component', 'mean_0', 'weight', 'cov_scalar', 'collapsed_flag']
        assert len(table) == 10
        first = table[table['component'] == 0]
        np.testing.assert_allclose(first['mean_0'], -0.3, atol=1e-15)
        np.testing.assert_allclose(first['weight'], 0.4, atol=1e-14)
        np.testing.assert_allclose(first['cov_scalar'], 0.25, atol=1e-15)
        assert not table['collapsed_flag'].any()

    def test_collapsed_rows_are_flagged(self, tiny_spec, policy_1d):
        net = linear_net(2, [0.0, 0.0, -1000.0, 0.0])
        table = policy_slice_export(net, policy_1d, tiny_spec, 1, [0.0, 0.5], ExtendedState(x=[0.0, 0.0]))
        at_origin, away = table[table['sweep_value'] == 0.0], table[table['sweep_value'] == 0.5]
        assert not at_origin['collapsed_flag'].any()
        assert away['collapsed_flag'].all()
        assert away['mean_0'].isna().all()

    def test_sweep_dimension_must_exist(self, tiny_spec, policy_1d):
        with pytest.raises(DimensionMismatch):
            policy_slice_export(constant_net(2), policy_1d, tiny_spec, 2, [0.0], default_start(tiny_spec))


def test_parse_grid():
    np.testing.assert_allclose(parse_grid('-1:1:5'), [-1, -0.5, 0, 0.5, 1])
    with pytest.raises(ValueError):
        parse_grid('0:1')
    with pytest.raises(ValueError):
        parse_grid('0:1:0')
