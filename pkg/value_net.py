"""
Feed-forward value network J_theta(x, C, t) and its differentiation contract.

Inputs are ordered [x_1 .. x_N, C, t]. Input gradients can be built with
`create_graph=True` so that losses containing dJ/dx and dJ/dC can themselves
be differentiated with respect to the network parameters.
"""
import json
import logging
import math

import numpy as np
import torch
import torch.nn as nn

from exceptions import DimensionMismatch
from gm_policy import ValueGradients
from models import as_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class Sine(nn.Module):
    def forward(self, x):
        return torch.sin(x)


def get_activation(name: str) -> nn.Module:
    """
    Return a PyTorch activation module for the given name.

    Only twice-differentiable activations are offered: the loss differentiates
    through input gradients.
    """
    name = name.lower()
    if name == 'softplus':
        return nn.Softplus()
    elif name == 'tanh':
        return nn.Tanh()
    elif name == 'sin':
        return Sine()
    else:
        raise ValueError(f"Unsupported activation: {name}")


class ValueNetwork(nn.Module):
    """
    Scalar value function J(x, C, t).

    Args:
        state_dim (int): Dimension N of x; the input width is N + 2.
        hidden_layers (tuple): Width of each hidden layer.
        activation (str): Hidden-layer activation ('softplus', 'tanh', 'sin').
    """
    def __init__(self, state_dim, hidden_layers=(64, 64, 64), activation='softplus'):
        super().__init__()
        self.state_dim = int(state_dim)
        self.hidden_layers = tuple(int(width) for width in hidden_layers)
        self.activation = activation
        layers = []
        width = self.state_dim + 2
        for hidden in self.hidden_layers:
            layers.append(nn.Linear(width, hidden))
            layers.append(get_activation(activation))
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.model = nn.Sequential(*layers)
        self.register_buffer('input_shift', torch.zeros(self.state_dim + 2))
        self.register_buffer('input_scale', torch.ones(self.state_dim + 2))
        self.whitened = False

    @property
    def input_dim(self):
        return self.state_dim + 2

    @property
    def architecture(self):
        return {
            'input_dim': self.input_dim,
            'hidden_layers': list(self.hidden_layers),
            'output_dim': 1,
        }

    def linear_layers(self):
        return [layer for layer in self.model if isinstance(layer, nn.Linear)]

    def set_whitening(self, shift, scale):
        self.input_shift.copy_(as_tensor(shift))
        self.input_scale.copy_(as_tensor(scale))
        self.whitened = True

    def forward(self, inputs):
        if self.whitened:
            inputs = (inputs - self.input_shift) / self.input_scale
        return self.model(inputs).squeeze(-1)

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def _inputs(net, x, C, t):
    x, C, t = as_tensor(x), as_tensor(C), as_tensor(t)
    if x.shape[-1] != net.state_dim:
        raise DimensionMismatch(f"x has dimension {x.shape[-1]}, network expects {net.state_dim}")
    C = C.expand(x.shape[:-1])
    t = t.expand(x.shape[:-1])
    return torch.cat([x, C.unsqueeze(-1), t.unsqueeze(-1)], dim=-1)


def initialize(architecture, seed, activation='softplus'):
    """Weights ~ N(0, 1/fan_in), zero biases, deterministic in `seed`"""
    net = ValueNetwork(architecture['input_dim'] - 2, architecture['hidden_layers'], activation)
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in net.linear_layers():
            fan_in = layer.weight.shape[1]
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator) / math.sqrt(fan_in))
            layer.bias.zero_()
    return net


def eval_net(net, x, C, t):
    return net(_inputs(net, x, C, t))


def input_gradients(net, x, C, t, create_graph=False):
    """J together with exact dJ/dx and dJ/dC at (x, C, t)"""
    inputs = _inputs(net, x, C, t).detach().requires_grad_(True)
    with torch.enable_grad():
        J = net(inputs)
        (grad,) = torch.autograd.grad(J.sum(), inputs, create_graph=create_graph)
    if not create_graph:
        J, grad = J.detach(), grad.detach()
    return ValueGradients(J=J, grad_x=grad[..., :net.state_dim], grad_C=grad[..., net.state_dim])


def parameter_vector(net):
    return nn.utils.parameters_to_vector(net.parameters()).detach().clone()


def set_parameter_vector(net, vector):
    with torch.no_grad():
        nn.utils.vector_to_parameters(as_tensor(vector), net.parameters())


def loss_parameter_gradient(net, batch, loss_evaluator):
    """
    Gradient of `loss_evaluator(vg)` with respect to every parameter, as one flat
    vector. `batch` holds tensors 'x', 'C', 't'; `loss_evaluator` receives the
    ValueGradients at those points and may use J, grad_x and grad_C freely.
    """
    params = list(net.parameters())
    vg = input_gradients(net, batch['x'], batch['C'], batch['t'], create_graph=True)
    loss = as_tensor(loss_evaluator(vg))
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in params))
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, params)
    ])


def fit_whitening(dataset):
    """Per-input mean and standard deviation over every (x, C, t) in the dataset"""
    states, costs, times = dataset.stacked()
    n_traj, n_points = costs.shape
    inputs = np.concatenate([
        states.reshape(n_traj * n_points, -1),
        costs.reshape(-1, 1),
        np.tile(times, n_traj).reshape(-1, 1),
    ], axis=1)
    shift = inputs.mean(axis=0)
    scale = inputs.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return shift, scale


def network_to_dict(net):
    layers = [
        {'weights': layer.weight.detach().tolist(), 'bias': layer.bias.detach().tolist()}
        for layer in net.linear_layers()
    ]
    whitening = None
    if net.whitened:
        whitening = {'shift': net.input_shift.tolist(), 'scale': net.input_scale.tolist()}
    return {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'architecture': net.architecture,
        'activation': net.activation,
        'whitening': whitening,
        'layers': layers,
    }


def network_from_dict(data):
    architecture = data['architecture']
    net = ValueNetwork(architecture['input_dim'] - 2, architecture['hidden_layers'], data['activation'])
    with torch.no_grad():
        for layer, stored in zip(net.linear_layers(), data['layers']):
            layer.weight.copy_(torch.tensor(stored['weights']))
            layer.bias.copy_(torch.tensor(stored['bias']))
    if data.get('whitening'):
        net.set_whitening(data['whitening']['shift'], data['whitening']['scale'])
    return net


def save_checkpoint(net, path, extra=None):
    data = network_to_dict(net)
    if extra:
        data.update(extra)
    with open(path, 'w') as handle:
        json.dump(data, handle)
    logger.info(f"Saved value network checkpoint to {path}")
    return path


def load_checkpoint(path):
    """Return (network, full checkpoint dict)"""
    with open(path) as handle:
        data = json.load(handle)
    return network_from_dict(data), data
