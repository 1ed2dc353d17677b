"""
Monte Carlo policy assessment: return distributions of the terminal discounted
cost, the KL-regularized cost functional, and policy slices along one state
coordinate.
"""
import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch
from scipy import stats

from exceptions import CurvatureCollapse, DimensionMismatch
from gm_policy import GaussianMixturePolicy, log_density, mixture_log_density, posterior_policy, sample_from_draws
from models import ExtendedState, as_tensor, terminal_utility
from simulator import ValueGuidedPolicy, fixed_x0_sampler, simulate, uniform_x0_sampler
from value_net import input_gradients

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True, eq=False)
class ReturnDistribution:
    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'samples', np.asarray(self.samples, dtype=np.float64))

    @property
    def n_samples(self):
        return len(self.samples)

    @property
    def mean(self):
        return float(self.samples.mean())

    @property
    def variance(self):
        if self.n_samples < 2:
            return 0.0
        return float(self.samples.var(ddof=1))

    @property
    def standard_error(self):
        if self.n_samples < 2:
            return 0.0
        return float(np.sqrt(self.variance / self.n_samples))

    def summary(self):
        quantiles = np.quantile(self.samples, QUANTILES)
        data = {
            'n_samples': self.n_samples,
            'mean': self.mean,
            'variance': self.variance,
            'standard_error': self.standard_error,
        }
        for level, value in zip(QUANTILES, quantiles):
            data[f"q{int(round(level * 100)):02d}"] = float(value)
        return data


@dataclass(frozen=True)
class RegularizedCost:
    expected_utility: float
    kl_term: float
    total: float
    expected_utility_se: float
    kl_term_se: float
    total_se: float
    n_samples: int

    def to_dict(self):
        return dict(self.__dict__)


def default_start(spec, x0_sampler=None):
    """Sampler mean for x, C = 0, t = 0"""
    sampler = x0_sampler or uniform_x0_sampler()
    return ExtendedState(x=np.full(spec.state_dim, sampler.mean), C=0.0, t=0.0)


def resolve_source(source):
    """Accept a behaviour policy, a (policy0, net) pair or a ValueGuidedPolicy"""
    if isinstance(source, (GaussianMixturePolicy, ValueGuidedPolicy)):
        return source
    policy0, net = source
    return ValueGuidedPolicy(policy0, net)


def _start_step(spec, start):
    start.validate(spec)
    return int(round(start.t / spec.dt))


def estimate_return_distribution(spec, policy_source, start, n_mc, seed, mode='effective'):
    """Empirical law of C_T for paths started at `start` under the source"""
    source = resolve_source(policy_source)
    _, costs, _ = simulate(spec, source, n_mc, seed, fixed_x0_sampler(start.x), mode=mode,
                           start_C=start.C, start_step=_start_step(spec, start))
    return ReturnDistribution(samples=costs[:, -1])


def sampled_kl_divergence(policy, policy0, x, n_kl, rng):
    """
    Per-state KL(policy || policy0) estimated from n_kl draws of `policy`.
    Returns (estimate, standard error), each of shape (...,).
    """
    batch = policy.weights.shape[:-1]
    uniforms = torch.as_tensor(rng.random(size=(n_kl,) + batch))
    normals = torch.as_tensor(rng.standard_normal(size=(n_kl,) + batch + (policy.means.shape[-1],)))
    weights = policy.weights.expand((n_kl,) + policy.weights.shape)
    means = policy.means.expand((n_kl,) + policy.means.shape)
    actions = sample_from_draws(weights, means, policy.covariances.sqrt(), uniforms, normals)
    log_ratio = mixture_log_density(torch.log(policy.weights), policy.means, policy.covariances, actions) \
        - log_density(policy0, x, actions)
    estimate = log_ratio.mean(0)
    if n_kl < 2:
        return estimate, torch.zeros_like(estimate)
    return estimate, log_ratio.std(0) / np.sqrt(n_kl)


def estimate_regularized_cost(spec, policy0, net_or_policy, start, n_mc, seed, n_kl=16, mode='effective'):
    """
    E U(Z_T) + (1/beta) E sum_s exp(-r s) KL(pi || pi0)(x_s) dt, with standard
    errors taken across trajectories.
    """
    if isinstance(net_or_policy, (GaussianMixturePolicy, ValueGuidedPolicy)):
        source = net_or_policy
    else:
        source = ValueGuidedPolicy(policy0, net_or_policy)
    kl_sums = np.zeros(n_mc)
    kl_rng = np.random.default_rng([int(seed), 1])
    dt = spec.dt

    def visit(step, t, x, C, policy):
        if source is policy0:
            return
        kl, _ = sampled_kl_divergence(policy, policy0, x, n_kl, kl_rng)
        kl_sums[:] += np.exp(-spec.discount_rate * t) * kl.detach().numpy() * dt

    _, costs, _ = simulate(spec, source, n_mc, seed, fixed_x0_sampler(start.x), mode=mode,
                           start_C=start.C, start_step=_start_step(spec, start), visit=visit)
    utility = terminal_utility(spec, as_tensor(costs[:, -1])).numpy()
    kl_term = kl_sums / spec.inverse_temperature
    total = utility + kl_term

    def se(values):
        return float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0

    return RegularizedCost(expected_utility=float(utility.mean()), kl_term=float(kl_term.mean()),
                           total=float(total.mean()), expected_utility_se=se(utility), kl_term_se=se(kl_term),
                           total_se=se(total), n_samples=n_mc)


def compare_policies(spec, policy0, net, start, n_mc, seed, n_kl=16, mode='effective'):
    """
    Behaviour versus value-guided policy on common random numbers. The
    improvement is J(pi0) - J(pi*): positive means the extracted policy is cheaper.
    """
    logger.info(f"Comparing behaviour and extracted policies over {n_mc} paths (seed {seed})")
    behavior_returns = estimate_return_distribution(spec, policy0, start, n_mc, seed, mode=mode)
    optimal_returns = estimate_return_distribution(spec, (policy0, net), start, n_mc, seed, mode=mode)
    behavior_cost = estimate_regularized_cost(spec, policy0, policy0, start, n_mc, seed, n_kl=n_kl, mode=mode)
    optimal_cost = estimate_regularized_cost(spec, policy0, net, start, n_mc, seed, n_kl=n_kl, mode=mode)

    difference = behavior_cost.total - optimal_cost.total
    combined_se = float(np.hypot(behavior_cost.total_se, optimal_cost.total_se))
    z_score = difference / combined_se if combined_se > 0 else 0.0
    return {
        'seed': int(seed),
        'n_mc': int(n_mc),
        'start': {'x': start.x.tolist(), 'C': float(start.C), 't': float(start.t)},
        'behavior': {'returns': behavior_returns.summary(), 'regularized_cost': behavior_cost.to_dict()},
        'optimal': {'returns': optimal_returns.summary(), 'regularized_cost': optimal_cost.to_dict()},
        'improvement': {
            'difference': float(difference),
            'combined_standard_error': combined_se,
            'z_score': float(z_score),
            'p_value': float(stats.norm.sf(z_score)),
        },
        '_distributions': {'behavior': behavior_returns, 'optimal': optimal_returns},
    }


def policy_slice_export(net, policy0, spec, sweep_dim, grid, anchor):
    """
    Posterior mixture along x[sweep_dim] = v with the rest of the anchor held
    fixed. Rows where the curvature factor collapses carry NaN values and
    collapsed_flag = True.
    """
    if not 0 <= sweep_dim < spec.state_dim:
        raise DimensionMismatch(f"sweep dimension {sweep_dim} outside [0, {spec.state_dim - 1}]")
    anchor.validate(spec)
    m, k_count = spec.action_dim, policy0.n_components
    mean_columns = [f"mean_{i}" for i in range(m)]
    rows = []
    for v in np.asarray(grid, dtype=np.float64):
        x = np.array(anchor.x, dtype=np.float64)
        x[sweep_dim] = v
        x_t = torch.as_tensor(x)
        vg = input_gradients(net, x_t, torch.tensor(float(anchor.C)), torch.tensor(float(anchor.t)))
        try:
            posterior = posterior_policy(policy0, vg, x_t, spec)
        except CurvatureCollapse:
            logger.warning(f"Curvature collapse at sweep value {v:g}")
            for k in range(k_count):
                row = {'sweep_value': float(v), 'component': k}
                row.update({column: np.nan for column in mean_columns})
                row.update({'weight': np.nan, 'cov_scalar': np.nan, 'collapsed_flag': True})
                rows.append(row)
            continue
        for k in range(k_count):
            row = {'sweep_value': float(v), 'component': k}
            row.update({column: float(posterior.means[k, i]) for i, column in enumerate(mean_columns)})
            row.update({'weight': float(posterior.weights[k]), 'cov_scalar': float(posterior.covariances[k]),
                        'collapsed_flag': False})
            rows.append(row)
    columns = ['sweep_value', 'component'] + mean_columns + ['weight', 'cov_scalar', 'collapsed_flag']
    return pd.DataFrame(rows, columns=columns)


def parse_grid(text):
    """'lo:hi:n' -> numpy grid of n points"""
    try:
        lo, hi, n = text.split(':')
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise ValueError(f"grid '{text}' is not of the form lo:hi:n")
    if n < 1:
        raise ValueError("grid must hold at least one point")
    return np.linspace(lo, hi, n)


def write_return_distribution(distribution, csv_path, json_path=None):
    pd.DataFrame({'sample': distribution.samples}).to_csv(csv_path, index=False, float_format='%.17g')
    if json_path:
        with open(json_path, 'w') as handle:
            json.dump(distribution.summary(), handle, indent=2)
    return csv_path


def write_comparison(comparison, path):
    data = {key: value for key, value in comparison.items() if not key.startswith('_')}
    with open(path, 'w') as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
    logger.info(f"Wrote policy comparison to {path}")
    return path
