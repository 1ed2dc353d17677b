from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

import app  # noqa: F401  (logging setup, float64 default)
from exceptions import DimensionMismatch

TERMINAL_UTILITIES = ('quadratic', 'absolute')


def as_tensor(value):
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def _check_last_dim(name, value, expected):
    if value.shape[-1] != expected:
        raise DimensionMismatch(f"{name} has trailing dimension {value.shape[-1]}, expected {expected}")


# Controlled diffusion and cost environment
@dataclass(frozen=True, eq=False)
class ModelSpec:
    state_dim: int
    action_dim: int
    drift_const_offset: np.ndarray        # mu0^(0), shape (N,)
    drift_const_linear: np.ndarray        # mu0^(1), shape (N, N)
    drift_action_offset: np.ndarray       # mu1^(0), shape (N, M)
    drift_action_linear: np.ndarray       # mu1^(1), shape (N, M), row i scaled by x_i
    volatility: np.ndarray                # diagonal sigma, shape (N,)
    cost_state_coeff: float = 1.0
    cost_action_coeff: float = 5.0
    discount_rate: float = 0.03
    inverse_temperature: float = 1.0
    horizon: float = 1.0
    n_steps: int = 40
    terminal_utility_kind: str = 'quadratic'

    def __post_init__(self):
        n, m = self.state_dim, self.action_dim
        if n < 1 or m < 1:
            raise DimensionMismatch("state_dim and action_dim must be positive")
        expected = {
            'drift_const_offset': (n,),
            'drift_const_linear': (n, n),
            'drift_action_offset': (n, m),
            'drift_action_linear': (n, m),
            'volatility': (n,),
        }
        for name, shape in expected.items():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise DimensionMismatch(f"{name} has shape {value.shape}, expected {shape}")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.cost_state_coeff < 0 or self.cost_action_coeff < 0:
            raise ValueError("cost coefficients must be non-negative")
        if np.any(self.volatility <= 0):
            raise ValueError("volatility entries must be strictly positive")
        if self.inverse_temperature <= 0:
            raise ValueError("inverse_temperature must be positive")
        if self.horizon <= 0 or self.n_steps < 1:
            raise ValueError("horizon must be positive and n_steps at least 1")
        if self.discount_rate < 0:
            raise ValueError("discount_rate must be non-negative")
        if self.terminal_utility_kind not in TERMINAL_UTILITIES:
            raise ValueError(f"unknown terminal utility '{self.terminal_utility_kind}'")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def time_grid(self):
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @cached_property
    def tensors(self):
        """Torch views of the array parameters"""
        return {
            'mu0_offset': torch.as_tensor(np.array(self.drift_const_offset)),
            'mu0_linear': torch.as_tensor(np.array(self.drift_const_linear)),
            'mu1_offset': torch.as_tensor(np.array(self.drift_action_offset)),
            'mu1_linear': torch.as_tensor(np.array(self.drift_action_linear)),
            'sigma': torch.as_tensor(np.array(self.volatility)),
        }

    def to_dict(self):
        return {
            'state_dim': self.state_dim,
            'action_dim': self.action_dim,
            'drift_const_offset': self.drift_const_offset.tolist(),
            'drift_const_linear': self.drift_const_linear.tolist(),
            'drift_action_offset': self.drift_action_offset.tolist(),
            'drift_action_linear': self.drift_action_linear.tolist(),
            'volatility': self.volatility.tolist(),
            'cost_state_coeff': float(self.cost_state_coeff),
            'cost_action_coeff': float(self.cost_action_coeff),
            'discount_rate': float(self.discount_rate),
            'inverse_temperature': float(self.inverse_temperature),
            'horizon': float(self.horizon),
            'n_steps': int(self.n_steps),
            'terminal_utility_kind': self.terminal_utility_kind,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return ModelSpec.from_dict(data)


def benchmark_spec_10d(volatility=0.1, n_steps=40, horizon=1.0):
    """Ten-dimensional benchmark: D_x = 10, D_a = 5, identity-shaped affine drift"""
    n, m = 10, 5
    return ModelSpec(
        state_dim=n,
        action_dim=m,
        drift_const_offset=0.1 * np.ones(n),
        drift_const_linear=0.2 * np.eye(n),
        drift_action_offset=0.1 * np.eye(n, m),
        drift_action_linear=0.2 * np.eye(n, m),
        volatility=volatility * np.ones(n),
        cost_state_coeff=1.0,
        cost_action_coeff=5.0,
        discount_rate=0.03,
        inverse_temperature=1.0,
        horizon=horizon,
        n_steps=n_steps,
    )


def benchmark_spec_100d(volatility=0.1, n_steps=40, horizon=1.0):
    """Hundred-dimensional benchmark: linear drift terms divided by 10 and beta = 5"""
    n, m = 100, 5
    return ModelSpec(
        state_dim=n,
        action_dim=m,
        drift_const_offset=0.1 * np.ones(n),
        drift_const_linear=0.02 * np.eye(n),
        drift_action_offset=0.1 * np.eye(n, m),
        drift_action_linear=0.02 * np.eye(n, m),
        volatility=volatility * np.ones(n),
        cost_state_coeff=1.0,
        cost_action_coeff=5.0,
        discount_rate=0.03,
        inverse_temperature=5.0,
        horizon=horizon,
        n_steps=n_steps,
    )


@dataclass(frozen=True, eq=False)
class ExtendedState:
    x: np.ndarray
    C: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'x', np.asarray(self.x, dtype=np.float64))
        if not np.isfinite(self.C):
            raise ValueError("accumulated cost must be finite")

    def validate(self, spec):
        _check_last_dim('x', self.x, spec.state_dim)
        if not 0.0 <= self.t <= spec.horizon:
            raise ValueError(f"t={self.t} outside [0, {spec.horizon}]")
        return self


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray     # (n_steps + 1,)
    states: np.ndarray    # (n_steps + 1, N)
    costs: np.ndarray     # (n_steps + 1,)

    def __post_init__(self):
        for name in ('times', 'states', 'costs'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.states.ndim != 2:
            raise DimensionMismatch("states must be a 2-D array")
        if not (len(self.times) == len(self.states) == len(self.costs)):
            raise DimensionMismatch("times, states and costs must have the same length")

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def terminal_cost(self):
        return float(self.costs[-1])


@dataclass(eq=False)
class Dataset:
    spec_fingerprint: str
    seed: int
    trajectories: list = field(default_factory=list)
    state_dim: int = 0
    n_steps: int = 0
    horizon: float = 0.0
    action_dim: int = 0

    def __len__(self):
        return len(self.trajectories)

    @property
    def dt(self):
        return self.horizon / self.n_steps if self.n_steps else 0.0

    @property
    def times(self):
        if self.trajectories:
            return self.trajectories[0].times
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def stacked(self):
        """Return (states, costs, times) as arrays of shape (n, S+1, N), (n, S+1), (S+1,)"""
        if not self.trajectories:
            return (np.zeros((0, self.n_steps + 1, self.state_dim)),
                    np.zeros((0, self.n_steps + 1)), self.times)
        states = np.stack([traj.states for traj in self.trajectories])
        costs = np.stack([traj.costs for traj in self.trajectories])
        return states, costs, self.times

    def check_grid(self, spec):
        """All trajectories must sit on the spec's time grid"""
        if self.state_dim != spec.state_dim or self.n_steps != spec.n_steps:
            raise DimensionMismatch(
                f"dataset grid (N={self.state_dim}, steps={self.n_steps}) does not match spec "
                f"(N={spec.state_dim}, steps={spec.n_steps})")
        if not np.isclose(self.horizon, spec.horizon):
            raise DimensionMismatch(f"dataset horizon {self.horizon} does not match spec horizon {spec.horizon}")
        return self


# Elementary maps. Inputs may carry leading batch dimensions.

def state_drift(spec, x):
    """mu0(x) = mu0^(0) + mu0^(1) x"""
    x = as_tensor(x)
    _check_last_dim('x', x, spec.state_dim)
    p = spec.tensors
    return p['mu0_offset'] + x @ p['mu0_linear'].T


def control_gain(spec, x):
    """mu1(x) = mu1^(0) + diag(x) mu1^(1), shape (..., N, M)"""
    x = as_tensor(x)
    _check_last_dim('x', x, spec.state_dim)
    p = spec.tensors
    return p['mu1_offset'] + x.unsqueeze(-1) * p['mu1_linear']


def drift(spec, x, a):
    x, a = as_tensor(x), as_tensor(a)
    _check_last_dim('a', a, spec.action_dim)
    gain = control_gain(spec, x)
    return state_drift(spec, x) + (gain @ a.unsqueeze(-1)).squeeze(-1)


def state_cost_rate(spec, x):
    """c0(x) = c0 * |x|^2"""
    x = as_tensor(x)
    return spec.cost_state_coeff * (x * x).sum(-1)


def action_cost_rate(spec, x):
    """c1(x) = c1 * |x|^2"""
    x = as_tensor(x)
    return spec.cost_action_coeff * (x * x).sum(-1)


def running_cost(spec, x, a):
    x, a = as_tensor(x), as_tensor(a)
    _check_last_dim('x', x, spec.state_dim)
    _check_last_dim('a', a, spec.action_dim)
    return state_cost_rate(spec, x) + 0.5 * action_cost_rate(spec, x) * (a * a).sum(-1)


def terminal_utility(spec, z):
    z = as_tensor(z)
    if spec.terminal_utility_kind == 'absolute':
        return z.abs()
    return z * z
