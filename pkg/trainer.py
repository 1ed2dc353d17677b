"""
Minibatch training of the value network on the path-wise NLL.

Shuffling is a pure function of (seed, epoch); the learning rate is set
explicitly at the start of every epoch, so a run resumed from a checkpoint
replays the remaining epochs exactly.
"""
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import torch

from app import debug_log
from exceptions import NonFiniteLoss
from hj_loss import nll_loss, steps_from_dataset
from value_net import fit_whitening, network_from_dict, network_to_dict

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ['epoch', 'mean_loss', 'hj_term', 'delta_s_term', 'clamp_events', 'learning_rate']


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 256
    epochs: int = 30
    learning_rate: float = 1e-3
    lr_decay_every: int = 5
    lr_decay_factor: float = 0.5
    lr_floor: float = 1e-5
    weight_decay: float = 1e-3
    nu_squared: float = 100.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = None
    hidden_layers: tuple = (64, 64, 64)
    activation: str = 'softplus'
    whiten_inputs: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0 or self.lr_floor <= 0:
            raise ValueError("learning rates must be positive")
        if self.nu_squared < 0:
            raise ValueError("nu_squared must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        object.__setattr__(self, 'betas', tuple(self.betas))
        object.__setattr__(self, 'hidden_layers', tuple(self.hidden_layers))

    def to_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        data['hidden_layers'] = list(self.hidden_layers)
        return data


def learning_rate_schedule(config, epoch):
    """Step decay: multiply by lr_decay_factor every lr_decay_every epochs, never below lr_floor"""
    if config.lr_decay_every <= 0:
        return config.learning_rate
    rate = config.learning_rate * config.lr_decay_factor ** (epoch // config.lr_decay_every)
    return max(rate, config.lr_floor)


def epoch_permutation(seed, epoch, n):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def build_optimizer(net, config):
    """AdamW with decoupled decay on weight matrices only"""
    weights = [p for name, p in net.named_parameters() if name.endswith('weight')]
    biases = [p for name, p in net.named_parameters() if not name.endswith('weight')]
    return torch.optim.AdamW(
        [{'params': weights, 'weight_decay': config.weight_decay},
         {'params': biases, 'weight_decay': 0.0}],
        lr=config.learning_rate, betas=config.betas, eps=config.eps)


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({column: row[column] for column in METRICS_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        logger.info(f"Wrote {len(self)} metric rows to {path}")
        return path


def _encode(value):
    if isinstance(value, torch.Tensor):
        return {'tensor': value.tolist()}
    return value


def _decode(value):
    if isinstance(value, dict) and 'tensor' in value:
        return torch.tensor(value['tensor'])
    return value


def optimizer_state_to_dict(optimizer):
    state = optimizer.state_dict()
    return {
        'state': {str(index): {key: _encode(value) for key, value in entry.items()}
                  for index, entry in state['state'].items()},
        'param_groups': state['param_groups'],
    }


def optimizer_state_from_dict(data):
    return {
        'state': {int(index): {key: _decode(value) for key, value in entry.items()}
                  for index, entry in data['state'].items()},
        'param_groups': [dict(group, betas=tuple(group['betas'])) for group in data['param_groups']],
    }


def save_training_checkpoint(net, optimizer, epoch, metrics, config, path):
    data = network_to_dict(net)
    data['training'] = {
        'epoch': epoch,
        'optimizer': optimizer_state_to_dict(optimizer),
        'metrics': metrics.rows,
        'config': config.to_dict(),
    }
    with open(path, 'w') as handle:
        json.dump(data, handle)
    logger.info(f"Checkpoint after epoch {epoch} written to {path}")
    return path


def load_training_checkpoint(path):
    """Return (network, resume state) from a training checkpoint"""
    with open(path) as handle:
        data = json.load(handle)
    return network_from_dict(data), data.get('training')


def _write_replay_bundle(replay_dir, epoch, batch_index, index, net, config):
    os.makedirs(replay_dir, exist_ok=True)
    path = os.path.join(replay_dir, f"replay_epoch{epoch}_batch{batch_index}.json")
    with open(path, 'w') as handle:
        json.dump({
            'epoch': epoch,
            'batch_index': batch_index,
            'step_indices': [int(i) for i in index],
            'config': config.to_dict(),
            'network': network_to_dict(net),
        }, handle)
    return path


def train(net, dataset, spec, policy0, config, checkpoint_path=None, resume_state=None, replay_dir=None):
    """
    Run `config.epochs` epochs of shuffled minibatch AdamW on the NLL.

    Returns the trained network and its MetricsLog. A checkpoint is written
    every `checkpoint_every` epochs and after the last epoch when
    `checkpoint_path` is given. Raises NonFiniteLoss on the first NaN or
    infinite minibatch loss after persisting a replay bundle.
    """
    dataset.check_grid(spec)
    steps = steps_from_dataset(dataset)
    n = len(steps)
    optimizer = build_optimizer(net, config)
    metrics = MetricsLog()
    start_epoch = 0

    if resume_state:
        optimizer.load_state_dict(optimizer_state_from_dict(resume_state['optimizer']))
        metrics.rows = list(resume_state['metrics'])
        start_epoch = int(resume_state['epoch'])
        logger.info(f"Resuming training at epoch {start_epoch}")
    elif config.whiten_inputs and not net.whitened and n:
        net.set_whitening(*fit_whitening(dataset))

    if replay_dir is None:
        replay_dir = os.path.dirname(checkpoint_path) if checkpoint_path else '.'

    for epoch in range(start_epoch, config.epochs):
        rate = learning_rate_schedule(config, epoch)
        for group in optimizer.param_groups:
            group['lr'] = rate
        order = epoch_permutation(config.seed, epoch, n)
        totals = {'loss': 0.0, 'hj': 0.0, 'ds': 0.0}
        clamp_events = 0

        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            index = order[start:start + config.batch_size]
            batch = steps.select(index)
            optimizer.zero_grad()
            terms = nll_loss(net, spec, policy0, batch, config.nu_squared)
            if not math.isfinite(float(terms.loss)):
                path = _write_replay_bundle(replay_dir, epoch, batch_index, index, net, config)
                error = NonFiniteLoss(epoch, batch_index, replay_path=path)
                debug_log("Training aborted", error=error)
                raise error
            terms.loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            optimizer.step()

            size = len(index)
            totals['loss'] += float(terms.loss) * size
            totals['hj'] += terms.hj_term * size
            totals['ds'] += terms.delta_s_term * size
            clamp_events += terms.clamp_events

        metrics.append(epoch=epoch, mean_loss=totals['loss'] / max(n, 1), hj_term=totals['hj'] / max(n, 1),
                       delta_s_term=totals['ds'] / max(n, 1), clamp_events=clamp_events, learning_rate=rate)
        logger.info(f"Epoch {epoch}: loss {metrics.rows[-1]['mean_loss']:.6g} "
                    f"(hj {metrics.rows[-1]['hj_term']:.6g}, dS {metrics.rows[-1]['delta_s_term']:.6g}, "
                    f"clamps {clamp_events}, lr {rate:.3g})")

        done = epoch + 1
        if checkpoint_path and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_training_checkpoint(net, optimizer, done, metrics, config, checkpoint_path)

    if checkpoint_path:
        save_training_checkpoint(net, optimizer, max(config.epochs, start_epoch), metrics, config,
                                 checkpoint_path)
    return net, metrics


def evaluate_loss_terms(net, dataset, spec, policy0, nu_squared):
    """Full-dataset NLL without touching the parameters"""
    steps = steps_from_dataset(dataset)
    return nll_loss(net, spec, policy0, steps, nu_squared, create_graph=False)


def evaluate_loss(net, dataset, spec, policy0, nu_squared):
    return float(evaluate_loss_terms(net, dataset, spec, policy0, nu_squared).loss)
