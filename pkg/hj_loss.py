"""
Training objective: the discrete path-wise Hamilton-Jacobi residual plus the
action mismatch between observed transitions and the transitions the tilted
policy would induce.

For a step (x_t, C_t, t) -> (x_{t+1}, C_{t+1}, t+1) the per-step loss is

    1/2 (J_{t+1} - J_t - H_HJ dt)^2 + nu^2 dS

with J_{t+1} replaced by U(C_T) on the last step of a trajectory. J_t and its
input gradients are evaluated at (x_t, C_t, t).
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from gm_policy import (
    CURVATURE_FLOOR,
    curvature_factors,
    expected_action_optimal,
    expected_action_sum_diff,
    free_energy,
)
from models import as_tensor, control_gain, drift, state_drift, terminal_utility
from value_net import eval_net, input_gradients

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepBatch:
    x: torch.Tensor          # (B, N)
    C: torch.Tensor          # (B,)
    t: torch.Tensor          # (B,)
    x_next: torch.Tensor
    C_next: torch.Tensor
    t_next: torch.Tensor
    terminal: torch.Tensor   # (B,) bool
    trajectory: torch.Tensor  # (B,) source trajectory index

    def __len__(self):
        return self.x.shape[0]

    def select(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        return StepBatch(*(getattr(self, name)[index] for name in self.__dataclass_fields__))

    @property
    def n_trajectories(self):
        return int(torch.unique(self.trajectory).numel())


def steps_from_dataset(dataset):
    """Flatten a dataset into trajectory-major step tuples"""
    states, costs, times = dataset.stacked()
    n_traj, n_points = costs.shape
    n_steps = n_points - 1
    times = np.broadcast_to(times, costs.shape)
    terminal = np.zeros((n_traj, n_steps), dtype=bool)
    terminal[:, -1] = True
    trajectory = np.repeat(np.arange(n_traj), n_steps)
    n_state = states.shape[-1]
    return StepBatch(
        x=torch.as_tensor(states[:, :-1].reshape(-1, n_state)),
        C=torch.as_tensor(costs[:, :-1].reshape(-1)),
        t=torch.as_tensor(times[:, :-1].reshape(-1)),
        x_next=torch.as_tensor(states[:, 1:].reshape(-1, n_state)),
        C_next=torch.as_tensor(costs[:, 1:].reshape(-1)),
        t_next=torch.as_tensor(times[:, 1:].reshape(-1)),
        terminal=torch.as_tensor(terminal.reshape(-1)),
        trajectory=torch.as_tensor(trajectory),
    )


@dataclass
class LossTerms:
    loss: torch.Tensor
    hj_term: float
    delta_s_term: float
    clamp_events: int


def hj_hamiltonian(spec, policy0, vg, x, delta_x, dt):
    """
    Effective HJ Hamiltonian

        (1/beta) log sum_k w_k exp(-beta H_k) + r J + (dx/dt - mu0 - mu1 <a>[J]) . dJ/dx

    The curvature factor is clamped at the floor, never raised.
    """
    x, delta_x, dt = as_tensor(x), as_tensor(delta_x), as_tensor(dt)
    vg = vg.project(spec, x)
    soft, _ = free_energy(policy0, vg, x, spec, clamp=True)
    a_opt = expected_action_optimal(policy0, vg, x, spec, clamp=True)
    velocity = delta_x / dt.unsqueeze(-1) if dt.dim() else delta_x / dt
    transport = ((velocity - drift(spec, x, a_opt)) * vg.grad_x).sum(-1)
    return -soft + spec.discount_rate * vg.J + transport


def delta_S(spec, policy0, vg, x, x_next, dt):
    """
    Log likelihood ratio of the observed transition under the behaviour drift
    versus the drift of the tilted policy (Ito discretization):

        sum_i [mu1 <a>[J-]]_i / sigma_i^2 * [(mu0 + mu1 <a>[J+] / 2) dt - x_next + x]_i
    """
    x, x_next, dt = as_tensor(x), as_tensor(x_next), as_tensor(dt)
    vg = vg.project(spec, x)
    plus, minus = expected_action_sum_diff(policy0, vg, x, spec, clamp=True)
    gain = control_gain(spec, x)
    pushed_minus = (gain @ minus.unsqueeze(-1)).squeeze(-1)
    pushed_plus = (gain @ plus.unsqueeze(-1)).squeeze(-1)
    dt = dt.unsqueeze(-1) if dt.dim() else dt
    mismatch = (state_drift(spec, x) + 0.5 * pushed_plus) * dt - x_next + x
    return (pushed_minus / spec.tensors['sigma'] ** 2 * mismatch).sum(-1)


def step_terms(net, spec, policy0, batch, create_graph=True):
    """Per-step HJ residuals, action mismatches and the number of clamp events"""
    vg = input_gradients(net, batch.x, batch.C, batch.t, create_graph=create_graph)
    vg = vg.project(spec, batch.x)
    dt = batch.t_next - batch.t
    if create_graph:
        J_next = eval_net(net, batch.x_next, batch.C_next, batch.t_next)
    else:
        with torch.no_grad():
            J_next = eval_net(net, batch.x_next, batch.C_next, batch.t_next)
    J_next = torch.where(batch.terminal, terminal_utility(spec, batch.C_next), J_next)
    hamiltonian = hj_hamiltonian(spec, policy0, vg, batch.x, batch.x_next - batch.x, dt)
    residual = J_next - vg.J - hamiltonian * dt
    mismatch = delta_S(spec, policy0, vg, batch.x, batch.x_next, dt)
    events = int((curvature_factors(policy0, vg, batch.x, spec) <= CURVATURE_FLOOR).sum())
    return residual, mismatch, events


def step_residual(net, spec, policy0, state_now, state_next, is_terminal):
    """HJ residual of one transition between two extended states"""
    batch = StepBatch(
        x=as_tensor(state_now.x).unsqueeze(0),
        C=torch.tensor([float(state_now.C)]),
        t=torch.tensor([float(state_now.t)]),
        x_next=as_tensor(state_next.x).unsqueeze(0),
        C_next=torch.tensor([float(state_next.C)]),
        t_next=torch.tensor([float(state_next.t)]),
        terminal=torch.tensor([bool(is_terminal)]),
        trajectory=torch.tensor([0]),
    )
    residual, _, _ = step_terms(net, spec, policy0, batch, create_graph=False)
    return residual[0]


def nll_loss(net, spec, policy0, batch, nu_squared, create_graph=True):
    """Mean over steps of 1/2 residual^2 + nu^2 dS"""
    if nu_squared < 0:
        raise ValueError("nu_squared must be non-negative")
    residual, mismatch, events = step_terms(net, spec, policy0, batch, create_graph=create_graph)
    hj = 0.5 * residual ** 2
    action = nu_squared * mismatch
    loss = (hj + action).mean()
    return LossTerms(loss=loss, hj_term=float(hj.mean()), delta_s_term=float(action.mean()),
                     clamp_events=events)
