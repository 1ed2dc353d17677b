import json

import numpy as np
import pytest
import torch
from scipy import integrate

from exceptions import CurvatureCollapse
from gm_policy import GaussianMixturePolicy, mean_action
from models import drift
from simulator import (
    accumulate_cost,
    dataset_summary,
    effective_drift,
    fixed_x0_sampler,
    read_dataset,
    simulate,
    simulate_dataset,
    simulate_under_value,
    spec_fingerprint,
    step_euler,
    trajectory_stream,
    uniform_x0_sampler,
    write_dataset,
)
from tests.helpers import constant_net, linear_net, make_spec


class TestElementarySteps:
    def test_effective_drift_with_zero_mean_action(self, benchmark_spec):
        x = np.linspace(-0.2, 0.2, 10)
        np.testing.assert_allclose(effective_drift(benchmark_spec, np.zeros(5), x).numpy(),
                                   drift(benchmark_spec, x, np.zeros(5)).numpy())

    def test_euler_step_without_noise_is_deterministic(self, tiny_spec):
        x = torch.tensor([0.1, 0.2])
        moved = step_euler(x, torch.tensor([1.0, -2.0]), tiny_spec, 0.025, torch.zeros(2))
        np.testing.assert_allclose(moved.numpy(), [0.125, 0.15], rtol=1e-14)
        still = step_euler(x, torch.zeros(2), tiny_spec, 0.025, torch.zeros(2))
        np.testing.assert_array_equal(still.numpy(), x.numpy())

    def test_euler_increment_moments(self, tiny_spec):
        n, dt = 100_000, tiny_spec.dt
        rng = np.random.default_rng(0)
        x = torch.full((n, 2), 0.1)
        velocity = torch.tensor([0.3, -0.1])
        moved = step_euler(x, velocity.expand(n, 2), tiny_spec, dt, torch.as_tensor(rng.standard_normal((n, 2))))
        increments = (moved - x).numpy()
        se = 0.1 * np.sqrt(dt / n)
        assert np.all(np.abs(increments.mean(0) - velocity.numpy() * dt) < 4 * se)
        np.testing.assert_allclose(increments.var(0), 0.01 * dt, rtol=0.05)

    def test_cost_accumulation(self, tiny_spec):
        assert float(accumulate_cost(torch.tensor(0.0), torch.tensor(1.0), tiny_spec.replace(discount_rate=0.0),
                                     0.025)) == pytest.approx(0.025)
        assert float(accumulate_cost(torch.tensor(0.7), torch.tensor(0.0), tiny_spec.replace(discount_rate=0.0),
                                     0.025)) == 0.7
        assert float(accumulate_cost(torch.tensor(1.0), torch.tensor(0.0), tiny_spec, 0.1)) == pytest.approx(1.003)

    def test_compounding_converges_at_first_order(self, tiny_spec):
        rate, horizon = 0.03, 1.0
        spec = tiny_spec.replace(discount_rate=rate)
        exact = (np.exp(rate * horizon) - 1.0) / rate

        def error(n_steps):
            C = torch.tensor(0.0)
            for _ in range(n_steps):
                C = accumulate_cost(C, torch.tensor(1.0), spec, horizon / n_steps)
            return abs(float(C) - exact)

        assert error(40) / error(80) == pytest.approx(2.0, rel=0.1)


class TestSimulation:
    def test_same_seed_gives_identical_files(self, tiny_spec, policy_1d, tmp_path):
        for name in ('a.jsonl', 'b.jsonl'):
            write_dataset(simulate_dataset(tiny_spec, policy_1d, 4, seed=3), tmp_path / name)
        assert (tmp_path / 'a.jsonl').read_bytes() == (tmp_path / 'b.jsonl').read_bytes()

    def test_trajectories_do_not_depend_on_the_batch(self, tiny_spec, policy_1d):
        small = simulate_dataset(tiny_spec, policy_1d, 3, seed=5)
        large = simulate_dataset(tiny_spec, policy_1d, 7, seed=5)
        for i in range(3):
            np.testing.assert_array_equal(small.trajectories[i].states, large.trajectories[i].states)

    def test_costs_start_at_zero_and_never_decrease(self, tiny_dataset):
        states, costs, times = tiny_dataset.stacked()
        assert np.all(costs[:, 0] == 0.0)
        assert np.all(np.diff(costs, axis=1) >= 0)
        np.testing.assert_allclose(times, np.linspace(0, 0.2, 9))
        assert np.all((states[:, 0] >= 0.05) & (states[:, 0] <= 0.15))

    def test_benchmark_paths_stay_finite(self, benchmark_spec):
        policy = GaussianMixturePolicy.constant([0.5, 0.5], [[-0.2] * 5, [0.3] * 5], [0.5, 0.6], state_dim=10)
        summary = dataset_summary(simulate_dataset(benchmark_spec, policy, 200, seed=0))
        assert summary['finite']
        assert max(np.abs(summary['x_min']).max(), np.abs(summary['x_max']).max()) < 1.0

    def test_near_deterministic_paths_follow_the_ode(self):
        spec = make_spec(1, 1, volatility=np.array([1e-12]), drift_action_linear=np.zeros((1, 1)), horizon=1.0,
                         n_steps=400)
        policy = GaussianMixturePolicy.constant([1.0], [[0.5]], [0.3], state_dim=1)
        states, _, times = simulate(spec, policy, 5, seed=1, x0_sampler=fixed_x0_sampler([0.1]))
        np.testing.assert_allclose(states, states[:1].repeat(5, axis=0), atol=1e-10)
        # dx/dt = 0.1 + 0.2 x + 0.1 * 0.5
        solution = integrate.solve_ivp(lambda t, y: 0.15 + 0.2 * y, (0.0, 1.0), [0.1], t_eval=times,
                                       rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(states[0, :, 0], solution.y[0], atol=1e-3)

    def test_sampled_and_effective_terminal_costs_agree(self, tiny_spec, policy_1d):
        effective = simulate_dataset(tiny_spec, policy_1d, 4000, seed=8, mode='effective').stacked()[1][:, -1]
        sampled = simulate_dataset(tiny_spec, policy_1d, 4000, seed=9, mode='sampled').stacked()[1][:, -1]
        se = np.hypot(effective.std(ddof=1), sampled.std(ddof=1)) / np.sqrt(4000)
        assert abs(effective.mean() - sampled.mean()) < 4 * se

    def test_unknown_mode(self, tiny_spec, policy_1d):
        with pytest.raises(ValueError):
            simulate_dataset(tiny_spec, policy_1d, 2, seed=0, mode='exact')

    def test_zero_value_network_reproduces_the_behaviour_paths(self, tiny_spec, policy_1d):
        behaviour = simulate_dataset(tiny_spec, policy_1d, 4, seed=6).stacked()[0]
        guided = simulate_under_value(tiny_spec, policy_1d, constant_net(2, 0.0), 4, seed=6).stacked()[0]
        np.testing.assert_allclose(guided, behaviour, atol=1e-12)

    def test_collapse_reports_the_trajectory(self, tiny_spec, policy_1d):
        net = linear_net(2, [0.0, 0.0, -1000.0, 0.0])
        with pytest.raises(CurvatureCollapse) as caught:
            simulate_under_value(tiny_spec, policy_1d, net, 3, seed=0)
        assert caught.value.trajectory_index == 0
        assert len(caught.value.state['x']) == 2

    def test_visit_sees_every_step(self, tiny_spec, policy_1d):
        seen = []
        simulate(tiny_spec, policy_1d, 2, seed=0, visit=lambda step, t, x, C, policy: seen.append(
            (step, float(policy.mean()[0]))))
        assert [step for step, _ in seen] == list(range(8))
        assert seen[0][1] == pytest.approx(float(mean_action(policy_1d, np.zeros(2))))


class TestRandomness:
    def test_streams_are_keyed_by_seed_and_index(self):
        assert trajectory_stream(1, 2).random() == trajectory_stream(1, 2).random()
        assert trajectory_stream(1, 2).random() != trajectory_stream(1, 3).random()
        assert trajectory_stream(1, 2).random() != trajectory_stream(2, 2).random()

    def test_uniform_start_sampler(self):
        sampler = uniform_x0_sampler(0.05, 0.15)
        draws = sampler(np.random.default_rng(0), 1000)
        assert sampler.mean == pytest.approx(0.1)
        assert draws.min() >= 0.05 and draws.max() <= 0.15


class TestDatasetFile:
    def test_written_file_layout(self, tiny_dataset, tiny_spec, policy_1d, tmp_path):
        path = write_dataset(tiny_dataset, tmp_path / 'data.jsonl')
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        assert len(lines) == 7
        assert header['format_version'] == 1
        assert header['dt'] == pytest.approx(0.025)
        assert header['spec_fingerprint'] == spec_fingerprint(tiny_spec, policy_1d)
        record = json.loads(lines[1])
        assert set(record) == {'x', 'C', 't'}
        assert len(record['x']) == 9 and len(record['x'][0]) == 2

    def test_read_back(self, tiny_dataset, tmp_path):
        restored = read_dataset(write_dataset(tiny_dataset, tmp_path / 'data.jsonl'))
        assert restored.spec_fingerprint == tiny_dataset.spec_fingerprint
        np.testing.assert_array_equal(restored.stacked()[0], tiny_dataset.stacked()[0])
        np.testing.assert_array_equal(restored.stacked()[1], tiny_dataset.stacked()[1])

    def test_empty_dataset_is_header_only(self, tiny_spec, policy_1d, tmp_path):
        dataset = simulate_dataset(tiny_spec, policy_1d, 0, seed=0)
        path = write_dataset(dataset, tmp_path / 'empty.jsonl')
        assert len(path.read_text().splitlines()) == 1
        assert len(read_dataset(path)) == 0

    def test_fingerprint_changes_with_the_model(self, tiny_spec, policy_1d):
        assert spec_fingerprint(tiny_spec, policy_1d) != spec_fingerprint(tiny_spec.replace(horizon=0.3), policy_1d)
