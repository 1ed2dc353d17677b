"""
Gaussian-mixture behaviour policy and the closed-form algebra of the
value-tilted (posterior) mixture.

Every function accepts torch tensors with arbitrary leading batch dimensions:
x is (..., N), actions are (..., M), per-component quantities are (..., K).
"""
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import torch

from exceptions import CurvatureCollapse, DegenerateCost, DimensionMismatch
from models import action_cost_rate, as_tensor, control_gain

logger = logging.getLogger(__name__)

CURVATURE_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class GaussianMixturePolicy:
    """pi0(a|x) = sum_k w_k N(a | A_k x + b_k, std_k^2 I)"""
    weights: np.ndarray        # (K,)
    mean_offsets: np.ndarray   # (K, M)
    mean_slopes: np.ndarray    # (K, M, N)
    stds: np.ndarray           # (K,)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        offsets = np.atleast_2d(np.asarray(self.mean_offsets, dtype=np.float64))
        slopes = np.asarray(self.mean_slopes, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        k = len(weights)
        if offsets.shape[0] != k or stds.shape != (k,) or slopes.ndim != 3 \
                or slopes.shape[:2] != offsets.shape:
            raise DimensionMismatch(
                f"inconsistent mixture shapes: weights {weights.shape}, offsets {offsets.shape}, "
                f"slopes {slopes.shape}, stds {stds.shape}")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(stds <= 0):
            raise ValueError("component standard deviations must be positive")
        weights = weights / weights.sum()
        for name, value in (('weights', weights), ('mean_offsets', offsets),
                            ('mean_slopes', slopes), ('stds', stds)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def constant(cls, weights, means, stds, state_dim):
        """Mixture whose component means do not depend on the state"""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        slopes = np.zeros(means.shape + (state_dim,))
        return cls(weights=weights, mean_offsets=means, mean_slopes=slopes, stds=stds)

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def action_dim(self):
        return self.mean_offsets.shape[1]

    @property
    def state_dim(self):
        return self.mean_slopes.shape[2]

    @cached_property
    def tensors(self):
        return {
            'log_weights': torch.log(torch.as_tensor(np.array(self.weights))),
            'weights': torch.as_tensor(np.array(self.weights)),
            'offsets': torch.as_tensor(np.array(self.mean_offsets)),
            'slopes': torch.as_tensor(np.array(self.mean_slopes)),
            'variances': torch.as_tensor(np.array(self.stds)) ** 2,
        }

    def component_means(self, x):
        """u_k(x) with shape (..., K, M)"""
        x = as_tensor(x)
        if x.shape[-1] != self.state_dim:
            raise DimensionMismatch(f"x has dimension {x.shape[-1]}, policy expects {self.state_dim}")
        p = self.tensors
        return p['offsets'] + torch.einsum('kmn,...n->...km', p['slopes'], x)

    def to_dict(self):
        return {
            'weights': self.weights.tolist(),
            'means': self.mean_offsets.tolist(),
            'slopes': self.mean_slopes.tolist(),
            'stds': self.stds.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(weights=data['weights'], mean_offsets=data['means'],
                   mean_slopes=data['slopes'], stds=data['stds'])


def sample_behavior_policy(action_dim, state_dim, n_components=2, mean_low=-0.5, mean_high=0.5,
                           variance_low=0.2, variance_high=0.4, seed=0):
    """Random behaviour policy: constant means and variances drawn uniformly, uniform weights"""
    rng = np.random.default_rng(seed)
    means = rng.uniform(mean_low, mean_high, size=(n_components, action_dim))
    variances = rng.uniform(variance_low, variance_high, size=n_components)
    weights = np.full(n_components, 1.0 / n_components)
    return GaussianMixturePolicy.constant(weights, means, np.sqrt(variances), state_dim)


@dataclass(frozen=True)
class ValueGradients:
    J: torch.Tensor                   # (...,)
    grad_x: torch.Tensor              # (..., N)
    grad_C: torch.Tensor              # (...,)
    projected: torch.Tensor = None    # (..., M), mu1(x)^T dJ/dx

    def project(self, spec, x):
        if self.projected is not None:
            return self
        projected = torch.einsum('...nm,...n->...m', control_gain(spec, x), self.grad_x)
        return replace(self, projected=projected)


def value_gradients(J, grad_x, grad_C, x, spec):
    vg = ValueGradients(J=as_tensor(J), grad_x=as_tensor(grad_x), grad_C=as_tensor(grad_C))
    return vg.project(spec, x)


@dataclass(frozen=True)
class PosteriorPolicy:
    weights: torch.Tensor      # (..., K)
    means: torch.Tensor        # (..., K, M)
    covariances: torch.Tensor  # (..., K), isotropic scalars
    x: torch.Tensor
    C: torch.Tensor = None
    t: torch.Tensor = None

    def mean(self):
        return (self.weights.unsqueeze(-1) * self.means).sum(-2)

    def expected_squared_norm(self):
        m = self.means.shape[-1]
        return (self.weights * ((self.means ** 2).sum(-1) + m * self.covariances)).sum(-1)

    def log_density(self, a):
        return mixture_log_density(torch.log(self.weights), self.means, self.covariances, a)

    def sample(self, rng):
        batch = self.weights.shape[:-1]
        uniforms = torch.as_tensor(rng.random(size=batch))
        normals = torch.as_tensor(rng.standard_normal(size=batch + (self.means.shape[-1],)))
        return sample_from_draws(self.weights, self.means, self.covariances.sqrt(), uniforms, normals)


def mixture_log_density(log_weights, means, variances, a):
    """log sum_k w_k N(a | means_k, variances_k I), stabilized by log-sum-exp"""
    a = as_tensor(a)
    m = means.shape[-1]
    sq = ((a.unsqueeze(-2) - means) ** 2).sum(-1)
    log_comp = -0.5 * m * torch.log(2 * math.pi * variances) - 0.5 * sq / variances
    return torch.logsumexp(log_weights + log_comp, dim=-1)


def sample_from_draws(weights, means, stds, uniforms, normals):
    """Pick component k by inverse CDF of `uniforms`, then shift and scale `normals`"""
    cdf = torch.cumsum(weights, dim=-1)
    k = torch.searchsorted(cdf.contiguous(), uniforms.unsqueeze(-1).contiguous()).squeeze(-1)
    k = k.clamp(max=weights.shape[-1] - 1)
    chosen_mean = torch.gather(means, -2, k[..., None, None].expand(k.shape + (1, means.shape[-1]))).squeeze(-2)
    chosen_std = torch.gather(stds.expand(weights.shape), -1, k.unsqueeze(-1)).squeeze(-1)
    return chosen_mean + chosen_std.unsqueeze(-1) * normals


def mean_action(policy, x):
    p = policy.tensors
    return (p['weights'].unsqueeze(-1) * policy.component_means(x)).sum(-2)


def sample_action(policy, x, rng):
    x = as_tensor(x)
    batch = x.shape[:-1]
    uniforms = torch.as_tensor(rng.random(size=batch))
    normals = torch.as_tensor(rng.standard_normal(size=batch + (policy.action_dim,)))
    stds = policy.tensors['variances'].sqrt()
    weights = policy.tensors['weights'].expand(batch + (policy.n_components,))
    return sample_from_draws(weights, policy.component_means(x), stds, uniforms, normals)


def log_density(policy, x, a):
    p = policy.tensors
    return mixture_log_density(p['log_weights'], policy.component_means(x), p['variances'], a)


def expected_squared_norm(policy, x):
    p = policy.tensors
    means = policy.component_means(x)
    return (p['weights'] * ((means ** 2).sum(-1) + policy.action_dim * p['variances'])).sum(-1)


def curvature_factors(policy, vg, x, spec):
    """1 + beta * sigma_k^2 * c1(x) * dJ/dC, shape (..., K)"""
    beta = spec.inverse_temperature
    q = action_cost_rate(spec, x) * vg.grad_C
    return 1.0 + beta * policy.tensors['variances'] * q.unsqueeze(-1)


def _guarded_curvature(policy, vg, x, spec, clamp):
    s = curvature_factors(policy, vg, x, spec)
    collapsed = s <= CURVATURE_FLOOR
    events = int(collapsed.sum())
    if events:
        if not clamp:
            raise CurvatureCollapse(
                f"curvature factor {float(s.min()):.3e} at or below floor {CURVATURE_FLOOR:g} "
                f"in {events} component evaluations")
        s = s.clamp(min=CURVATURE_FLOOR)
    return s, events


def component_hamiltonians(policy, vg, x, spec, clamp=False):
    """All component Hamiltonians H_k[J], shape (..., K), plus the number of clamp events.

    H_k = (|u_k|^2 q + 2 u_k.m - beta sigma_k^2 |m|^2) / (2 s_k) + M/(2 beta) log s_k,
    with q = c1(x) dJ/dC, m = mu1(x)^T dJ/dx and s_k the curvature factor.
    """
    beta = spec.inverse_temperature
    vg = vg.project(spec, x)
    s, events = _guarded_curvature(policy, vg, x, spec, clamp)
    u = policy.component_means(x)
    m = vg.projected.unsqueeze(-2)
    q = (action_cost_rate(spec, x) * vg.grad_C).unsqueeze(-1)
    variances = policy.tensors['variances']
    numerator = (u ** 2).sum(-1) * q + 2 * (u * m).sum(-1) - beta * variances * (m ** 2).sum(-1)
    h = 0.5 * numerator / s + 0.5 * policy.action_dim / beta * torch.log(s)
    return h, events


def component_hamiltonian(policy, k, vg, x, spec):
    h, _ = component_hamiltonians(policy, vg, x, spec)
    return h[..., k]


def zero_temperature_hamiltonian(vg, x, spec):
    """beta -> infinity limit of H_k, identical for every component"""
    vg = vg.project(spec, x)
    q = _zero_temperature_denominator(vg, x, spec)
    return -0.5 * (vg.projected ** 2).sum(-1) / q


def posterior_weights(log_weights, hamiltonians, beta):
    return torch.softmax(log_weights - beta * hamiltonians, dim=-1)


def free_energy(policy, vg, x, spec, clamp=False):
    """-(1/beta) log sum_k w_k exp(-beta H_k), plus clamp events"""
    beta = spec.inverse_temperature
    h, events = component_hamiltonians(policy, vg, x, spec, clamp=clamp)
    return -torch.logsumexp(policy.tensors['log_weights'] - beta * h, dim=-1) / beta, events


def posterior_policy(policy, vg, x, spec, C=None, t=None, clamp=False):
    beta = spec.inverse_temperature
    x = as_tensor(x)
    vg = vg.project(spec, x)
    h, _ = component_hamiltonians(policy, vg, x, spec, clamp=clamp)
    s, _ = _guarded_curvature(policy, vg, x, spec, clamp=True)
    variances = policy.tensors['variances']
    weights = posterior_weights(policy.tensors['log_weights'], h, beta)
    means = (policy.component_means(x) - beta * variances.unsqueeze(-1) * vg.projected.unsqueeze(-2)) \
        / s.unsqueeze(-1)
    covariances = variances / s
    return PosteriorPolicy(weights=weights, means=means, covariances=covariances, x=x, C=C, t=t)


def expected_action_optimal(policy, vg, x, spec, clamp=False):
    return posterior_policy(policy, vg, x, spec, clamp=clamp).mean()


def expected_action_sum_diff(policy, vg, x, spec, clamp=False):
    """(<a>[J] + <a>_0, <a>[J] - <a>_0)"""
    optimal = expected_action_optimal(policy, vg, x, spec, clamp=clamp)
    prior = mean_action(policy, x)
    return optimal + prior, optimal - prior


def _zero_temperature_denominator(vg, x, spec):
    c1 = action_cost_rate(spec, x)
    if bool(torch.any(c1 == 0)):
        raise DegenerateCost("action cost c1(x) vanishes; the deterministic action is undefined")
    if bool(torch.any(vg.grad_C.abs() < CURVATURE_FLOOR)):
        raise DegenerateCost(f"|dJ/dC| below {CURVATURE_FLOOR:g}; the deterministic action is undefined")
    return c1 * vg.grad_C


def zero_temperature_action(vg, x, spec):
    """a = -mu1(x)^T dJ/dx / (c1(x) dJ/dC)"""
    vg = vg.project(spec, x)
    q = _zero_temperature_denominator(vg, x, spec)
    return -vg.projected / q.unsqueeze(-1)
