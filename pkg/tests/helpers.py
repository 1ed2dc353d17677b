"""Small builders shared by the test modules"""
import numpy as np
import torch

from models import ModelSpec
from value_net import initialize


def make_spec(state_dim=2, action_dim=1, **overrides):
    """Benchmark-scale coefficients on a short grid"""
    params = dict(
        state_dim=state_dim,
        action_dim=action_dim,
        drift_const_offset=0.1 * np.ones(state_dim),
        drift_const_linear=0.2 * np.eye(state_dim),
        drift_action_offset=0.1 * np.eye(state_dim, action_dim),
        drift_action_linear=0.2 * np.eye(state_dim, action_dim),
        volatility=0.1 * np.ones(state_dim),
        horizon=0.2,
        n_steps=8,
    )
    params.update(overrides)
    return ModelSpec(**params)


def scalar_spec(**overrides):
    """N = M = 1 with mu0 = 0 and mu1 = 1"""
    params = dict(drift_const_offset=np.zeros(1), drift_const_linear=np.zeros((1, 1)),
                  drift_action_offset=np.ones((1, 1)), drift_action_linear=np.zeros((1, 1)))
    params.update(overrides)
    return make_spec(1, 1, **params)


def linear_net(state_dim, weights, bias=0.0):
    """Network without hidden layers: J = w . [x, C, t] + b"""
    net = initialize({'input_dim': state_dim + 2, 'hidden_layers': [], 'output_dim': 1}, seed=0)
    layer = net.linear_layers()[0]
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(np.asarray(weights, dtype=np.float64)).reshape(1, -1))
        layer.bias.fill_(bias)
    return net


def constant_net(state_dim, value=0.0, hidden_layers=(8, 8)):
    net = initialize({'input_dim': state_dim + 2, 'hidden_layers': list(hidden_layers), 'output_dim': 1}, seed=0)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        net.linear_layers()[-1].bias.fill_(value)
    return net
