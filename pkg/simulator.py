"""
Euler-Maruyama simulation of the controlled diffusion with discounted cost
accumulation, plus the JSON Lines dataset format.

Each trajectory owns a counter-based random stream derived from
(seed, trajectory index), so a trajectory's path does not depend on how many
other trajectories are simulated alongside it. Trajectories are integrated as
one vectorized batch.
"""
import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np
import torch

from exceptions import CurvatureCollapse, DimensionMismatch
from gm_policy import (
    CURVATURE_FLOOR,
    GaussianMixturePolicy,
    PosteriorPolicy,
    curvature_factors,
    posterior_policy,
    sample_from_draws,
)
from models import (
    Dataset,
    Trajectory,
    action_cost_rate,
    as_tensor,
    drift,
    running_cost,
    state_cost_rate,
)
from value_net import input_gradients

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
MODES = ('effective', 'sampled')


@dataclass(frozen=True, eq=False)
class ValueGuidedPolicy:
    """The posterior mixture extracted on the fly from a value network"""
    behavior: GaussianMixturePolicy
    net: object


def spec_fingerprint(spec, policy):
    payload = json.dumps({'model': spec.to_dict(), 'behavior_policy': policy.to_dict()},
                         sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode()).hexdigest()


def trajectory_stream(seed, index):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def uniform_x0_sampler(low=0.05, high=0.15):
    def sample(rng, state_dim):
        return rng.uniform(low, high, size=state_dim)
    sample.mean = 0.5 * (low + high)
    return sample


def fixed_x0_sampler(x0):
    x0 = np.asarray(x0, dtype=np.float64)

    def sample(rng, state_dim):
        if x0.shape != (state_dim,):
            raise DimensionMismatch(f"start state has shape {x0.shape}, expected ({state_dim},)")
        return x0.copy()
    return sample


def effective_drift(spec, policy_mean_action, x):
    """mu0(x) + mu1(x) <a>"""
    return drift(spec, x, policy_mean_action)


def step_euler(x, drift_value, spec, dt, gaussian_noise):
    x, drift_value, noise = as_tensor(x), as_tensor(drift_value), as_tensor(gaussian_noise)
    return x + drift_value * dt + spec.tensors['sigma'] * (dt ** 0.5) * noise


def accumulate_cost(C, running_cost_value, spec, dt):
    """C + (c + r C) dt"""
    C, running_cost_value = as_tensor(C), as_tensor(running_cost_value)
    return C + (running_cost_value + spec.discount_rate * C) * dt


def policy_at(spec, source, x, C, t):
    """The action distribution the source prescribes at each row of (x, C, t)"""
    if isinstance(source, GaussianMixturePolicy):
        p = source.tensors
        batch = x.shape[:-1]
        return PosteriorPolicy(weights=p['weights'].expand(batch + (source.n_components,)),
                               means=source.component_means(x),
                               covariances=p['variances'].expand(batch + (source.n_components,)),
                               x=x, C=C, t=t)
    vg = input_gradients(source.net, x, C, t).project(spec, x)
    s = curvature_factors(source.behavior, vg, x, spec)
    collapsed = (s <= CURVATURE_FLOOR).any(-1)
    if bool(collapsed.any()):
        row = int(torch.nonzero(collapsed)[0])
        state = {'x': x[row].tolist(), 'C': float(C[row]), 't': float(t[row])}
        raise CurvatureCollapse(f"posterior policy collapsed at state {state}", state=state,
                                trajectory_index=row)
    return posterior_policy(source.behavior, vg, x, spec, C=C, t=t)


@dataclass
class _Draws:
    x0: np.ndarray        # (n, N)
    noise: np.ndarray     # (n, S, N)
    uniforms: np.ndarray  # (n, S)
    normals: np.ndarray   # (n, S, M)


def _draw(spec, n_traj, seed, x0_sampler, n_steps):
    n, m = spec.state_dim, spec.action_dim
    x0 = np.zeros((n_traj, n))
    noise = np.zeros((n_traj, n_steps, n))
    uniforms = np.zeros((n_traj, n_steps))
    normals = np.zeros((n_traj, n_steps, m))
    for i in range(n_traj):
        rng = trajectory_stream(seed, i)
        x0[i] = x0_sampler(rng, n)
        noise[i] = rng.standard_normal((n_steps, n))
        uniforms[i] = rng.random(n_steps)
        normals[i] = rng.standard_normal((n_steps, m))
    return _Draws(x0, noise, uniforms, normals)


def simulate(spec, source, n_traj, seed, x0_sampler=None, mode='effective', start_C=0.0,
             start_step=0, visit=None):
    """
    Integrate n_traj paths from step `start_step` to the horizon.

    In 'effective' mode the drift uses the policy-mean action and the running
    cost uses E|a|^2; in 'sampled' mode an action is drawn each step and enters
    both. `visit(step, t, x, C, policy)` is called before every step.
    Returns (states (n, S+1, N), costs (n, S+1), times (S+1,)).
    """
    if mode not in MODES:
        raise ValueError(f"unknown simulation mode '{mode}'")
    x0_sampler = x0_sampler or uniform_x0_sampler()
    dt = spec.dt
    n_steps = spec.n_steps - start_step
    times = spec.time_grid[start_step:]
    draws = _draw(spec, n_traj, seed, x0_sampler, n_steps)

    x = torch.as_tensor(draws.x0)
    C = torch.full((n_traj,), float(start_C))
    states, costs = [x], [C]
    for j in range(n_steps):
        t = torch.full((n_traj,), float(times[j]))
        policy = policy_at(spec, source, x, C, t)
        if visit is not None:
            visit(start_step + j, float(times[j]), x, C, policy)
        if mode == 'sampled':
            actions = sample_from_draws(policy.weights, policy.means, policy.covariances.sqrt(),
                                        torch.as_tensor(draws.uniforms[:, j]),
                                        torch.as_tensor(draws.normals[:, j]))
            drift_value = drift(spec, x, actions)
            cost_rate = running_cost(spec, x, actions)
        else:
            drift_value = effective_drift(spec, policy.mean(), x)
            cost_rate = state_cost_rate(spec, x) + 0.5 * action_cost_rate(spec, x) * policy.expected_squared_norm()
        C = accumulate_cost(C, cost_rate, spec, dt)
        x = step_euler(x, drift_value, spec, dt, torch.as_tensor(draws.noise[:, j]))
        states.append(x)
        costs.append(C)

    states = torch.stack(states, dim=1).detach().numpy()
    costs = torch.stack(costs, dim=1).detach().numpy()
    return states, costs, times


def _as_dataset(spec, policy, seed, states, costs, times):
    trajectories = [Trajectory(times=times, states=states[i], costs=costs[i]) for i in range(len(states))]
    return Dataset(spec_fingerprint=spec_fingerprint(spec, policy), seed=int(seed),
                   trajectories=trajectories, state_dim=spec.state_dim, n_steps=spec.n_steps,
                   horizon=spec.horizon, action_dim=spec.action_dim)


def simulate_dataset(spec, policy, n_traj, seed, x0_sampler=None, mode='effective'):
    """Behaviour dataset under pi0; the default uses the policy-averaged drift and cost"""
    logger.info(f"Simulating {n_traj} behaviour trajectories (seed {seed}, {spec.n_steps} steps, {mode} mode)")
    states, costs, times = simulate(spec, policy, n_traj, seed, x0_sampler, mode=mode)
    return _as_dataset(spec, policy, seed, states, costs, times)


def simulate_under_value(spec, policy0, net, n_traj, seed, x0_sampler=None, mode='effective'):
    """Forward dynamics under the posterior policy extracted from `net`"""
    logger.info(f"Simulating {n_traj} trajectories under the value-guided policy ({mode} mode)")
    source = ValueGuidedPolicy(policy0, net)
    states, costs, times = simulate(spec, source, n_traj, seed, x0_sampler, mode=mode)
    return _as_dataset(spec, policy0, seed, states, costs, times)


def dataset_summary(dataset):
    states, costs, _ = dataset.stacked()
    if not len(dataset):
        return {'n_trajectories': 0, 'n_steps': dataset.n_steps, 'finite': True}
    return {
        'n_trajectories': len(dataset),
        'n_steps': dataset.n_steps,
        'finite': bool(np.isfinite(states).all() and np.isfinite(costs).all()),
        'x_min': states.min(axis=(0, 1)).tolist(),
        'x_max': states.max(axis=(0, 1)).tolist(),
        'terminal_cost_min': float(costs[:, -1].min()),
        'terminal_cost_mean': float(costs[:, -1].mean()),
        'terminal_cost_max': float(costs[:, -1].max()),
    }


def write_dataset(dataset, path):
    header = {
        'format_version': DATASET_FORMAT_VERSION,
        'state_dim': dataset.state_dim,
        'action_dim': dataset.action_dim,
        'n_steps': dataset.n_steps,
        'horizon': dataset.horizon,
        'dt': dataset.dt,
        'seed': dataset.seed,
        'spec_fingerprint': dataset.spec_fingerprint,
    }
    with open(path, 'w') as handle:
        handle.write(json.dumps(header) + '\n')
        for traj in dataset.trajectories:
            record = {'x': traj.states.tolist(), 'C': traj.costs.tolist(), 't': traj.times.tolist()}
            handle.write(json.dumps(record) + '\n')
    logger.info(f"Wrote {len(dataset)} trajectories to {path}")
    return path


def read_dataset(path):
    with open(path) as handle:
        header = json.loads(handle.readline())
        if header.get('format_version') != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {header.get('format_version')}")
        trajectories = []
        for line in handle:
            if not line.strip():
                continue
            record = json.loads(line)
            trajectories.append(Trajectory(times=record['t'], states=record['x'], costs=record['C']))
    return Dataset(spec_fingerprint=header['spec_fingerprint'], seed=header['seed'],
                   trajectories=trajectories, state_dim=header['state_dim'], n_steps=header['n_steps'],
                   horizon=header['horizon'], action_dim=header['action_dim'])
