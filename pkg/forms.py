"""
Run configuration: one JSON document with sections model, behavior_policy,
simulate, train and evaluate, validated section by section with WTForms.

Errors are reported as (JSON pointer, message) pairs, e.g.
('/model/volatility/3', 'must be strictly positive').
"""
import json
import logging
import math
import numbers
import re
from dataclasses import dataclass

import numpy as np
from wtforms import Field, Form, FormField
from wtforms.validators import AnyOf, NumberRange, StopValidation, ValidationError

from exceptions import ConfigError
from gm_policy import GaussianMixturePolicy, sample_behavior_policy
from models import ExtendedState, ModelSpec
from simulator import MODES, spec_fingerprint, uniform_x0_sampler
from trainer import TrainingConfig

logger = logging.getLogger(__name__)

_ELEMENT_POINTER = re.compile(r'^(/[0-9/]+): (.*)$')


class ValueField(Field):
    """Holds the decoded JSON value untouched; validators do the type checks"""
    def process_data(self, value):
        self.data = value

    def _value(self):
        return json.dumps(self.data)


class Required:
    def __init__(self, message='is required'):
        self.message = message

    def __call__(self, form, field):
        if field.data is None:
            raise StopValidation(self.message)


class Nullable:
    """Stops the chain quietly when the value is null or absent"""
    def __call__(self, form, field):
        if field.data is None:
            raise StopValidation()


class Number:
    """Finite real number; the range is left to NumberRange"""
    def __call__(self, form, field):
        value = field.data
        if isinstance(value, bool) or not isinstance(value, numbers.Real) or not math.isfinite(value):
            raise StopValidation('must be a finite number')


class Integer:
    def __call__(self, form, field):
        if isinstance(field.data, bool) or not isinstance(field.data, numbers.Integral):
            raise StopValidation('must be an integer')


class Positive:
    def __call__(self, form, field):
        if field.data <= 0:
            raise ValidationError('must be greater than 0')


def in_range(min=None, max=None):
    if max is None:
        message = 'must be at least %(min)s'
    elif min is None:
        message = 'must be at most %(max)s'
    else:
        message = 'must be between %(min)s and %(max)s'
    return NumberRange(min=min, max=max, message=message)


class Boolean:
    def __call__(self, form, field):
        if not isinstance(field.data, bool):
            raise StopValidation('must be true or false')


class ArrayLike:
    """A finite number or a rectangular nested list of finite numbers"""
    def __call__(self, form, field):
        if isinstance(field.data, (bool, str, dict)):
            raise StopValidation('must be a number or a nested list of numbers')
        try:
            array = np.asarray(field.data, dtype=np.float64)
        except (TypeError, ValueError):
            raise StopValidation('must be a number or a nested list of numbers')
        bad = np.argwhere(~np.isfinite(array))
        if len(bad):
            raise StopValidation(_element_message(bad[0], 'must be finite'))


def _element_message(index, message):
    if len(index) == 0:
        return message
    return '/' + '/'.join(str(int(i)) for i in index) + ': ' + message


def _valid_dim(field):
    value = field.data
    return isinstance(value, numbers.Integral) and not isinstance(value, bool) and value >= 1


def _check_shape(field, shape, allow_scalar=True):
    array = np.asarray(field.data, dtype=np.float64)
    if allow_scalar and array.ndim == 0:
        return array
    if array.shape != tuple(shape):
        expected = f"{list(shape)} or a scalar" if allow_scalar else f"{list(shape)}"
        raise ValidationError(f"expected shape {expected}, got {list(array.shape)}")
    return array


def expand_array(value, shape, kind='ones'):
    """Scalar shorthand: 'ones' fills the shape, 'eye' gives scalar * identity (rectangular allowed)"""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim:
        return array
    if kind == 'eye':
        return float(array) * np.eye(*shape)
    return float(array) * np.ones(shape)


class ModelForm(Form):
    state_dim = ValueField('State dimension', validators=[Required(), Integer(), in_range(1)])
    action_dim = ValueField('Action dimension', validators=[Required(), Integer(), in_range(1)])
    drift_const_offset = ValueField('mu0 offset', default=0.1, validators=[Required(), ArrayLike()])
    drift_const_linear = ValueField('mu0 linear', default=0.2, validators=[Required(), ArrayLike()])
    drift_action_offset = ValueField('mu1 offset', default=0.1, validators=[Required(), ArrayLike()])
    drift_action_linear = ValueField('mu1 linear', default=0.2, validators=[Required(), ArrayLike()])
    volatility = ValueField('Volatility', default=0.1, validators=[Required(), ArrayLike()])
    cost_state_coeff = ValueField('c0', default=1.0, validators=[Required(), Number(), in_range(0)])
    cost_action_coeff = ValueField('c1', default=5.0, validators=[Required(), Number(), in_range(0)])
    discount_rate = ValueField('Discount rate', default=0.03, validators=[Required(), Number(), in_range(0)])
    inverse_temperature = ValueField('Inverse temperature', default=1.0,
                                     validators=[Required(), Number(), Positive()])
    horizon = ValueField('Horizon', default=1.0, validators=[Required(), Number(), Positive()])
    n_steps = ValueField('Time steps', default=40, validators=[Required(), Integer(), in_range(1)])
    terminal_utility_kind = ValueField('Terminal utility', default='quadratic',
                                       validators=[Required(), AnyOf(['quadratic', 'absolute'])])

    def _dims(self):
        n = self.state_dim.data if _valid_dim(self.state_dim) else None
        m = self.action_dim.data if _valid_dim(self.action_dim) else None
        return n, m

    def validate_drift_const_offset(self, field):
        n, _ = self._dims()
        if n:
            _check_shape(field, (n,))

    def validate_drift_const_linear(self, field):
        n, _ = self._dims()
        if n:
            _check_shape(field, (n, n))

    def validate_drift_action_offset(self, field):
        n, m = self._dims()
        if n and m:
            _check_shape(field, (n, m))

    def validate_drift_action_linear(self, field):
        n, m = self._dims()
        if n and m:
            _check_shape(field, (n, m))

    def validate_volatility(self, field):
        n, _ = self._dims()
        if not n:
            return
        array = _check_shape(field, (n,))
        bad = np.argwhere(array <= 0)
        if len(bad):
            raise ValidationError(_element_message(bad[0], 'must be strictly positive'))

    def build(self):
        n, m = self.state_dim.data, self.action_dim.data
        return ModelSpec(
            state_dim=n,
            action_dim=m,
            drift_const_offset=expand_array(self.drift_const_offset.data, (n,)),
            drift_const_linear=expand_array(self.drift_const_linear.data, (n, n), 'eye'),
            drift_action_offset=expand_array(self.drift_action_offset.data, (n, m), 'eye'),
            drift_action_linear=expand_array(self.drift_action_linear.data, (n, m), 'eye'),
            volatility=expand_array(self.volatility.data, (n,)),
            cost_state_coeff=float(self.cost_state_coeff.data),
            cost_action_coeff=float(self.cost_action_coeff.data),
            discount_rate=float(self.discount_rate.data),
            inverse_temperature=float(self.inverse_temperature.data),
            horizon=float(self.horizon.data),
            n_steps=int(self.n_steps.data),
            terminal_utility_kind=self.terminal_utility_kind.data,
        )


class BehaviorPolicyForm(Form):
    # Explicit mixture
    weights = ValueField('Weights', validators=[Nullable(), ArrayLike()])
    means = ValueField('Means', validators=[Nullable(), ArrayLike()])
    slopes = ValueField('Mean slopes', validators=[Nullable(), ArrayLike()])
    stds = ValueField('Standard deviations', validators=[Nullable(), ArrayLike()])
    # Sampling recipe, used when no explicit mixture is given
    n_components = ValueField('Components', default=2, validators=[Required(), Integer(), in_range(1)])
    mean_low = ValueField('Mean low', default=-0.5, validators=[Required(), Number()])
    mean_high = ValueField('Mean high', default=0.5, validators=[Required(), Number()])
    variance_low = ValueField('Variance low', default=0.2,
                              validators=[Required(), Number(), Positive()])
    variance_high = ValueField('Variance high', default=0.4,
                               validators=[Required(), Number(), Positive()])
    seed = ValueField('Seed', default=0, validators=[Required(), Integer(), in_range(0)])

    @property
    def explicit(self):
        return any(f.data is not None for f in (self.weights, self.means, self.stds, self.slopes))

    def validate_weights(self, field):
        array = np.atleast_1d(np.asarray(field.data, dtype=np.float64))
        if array.ndim != 1:
            raise ValidationError('must be a list of weights')
        bad = np.argwhere(array < 0)
        if len(bad):
            raise ValidationError(_element_message(bad[0], 'must be non-negative'))
        if abs(array.sum() - 1.0) > 1e-9:
            raise ValidationError('must sum to 1')

    def validate_stds(self, field):
        array = np.atleast_1d(np.asarray(field.data, dtype=np.float64))
        bad = np.argwhere(array <= 0)
        if len(bad):
            raise ValidationError(_element_message(bad[0], 'must be strictly positive'))

    def validate_mean_high(self, field):
        if isinstance(self.mean_low.data, numbers.Real) and field.data < self.mean_low.data:
            raise ValidationError('must not be below mean_low')

    def validate_variance_high(self, field):
        if isinstance(self.variance_low.data, numbers.Real) and field.data < self.variance_low.data:
            raise ValidationError('must not be below variance_low')

    def cross_errors(self, state_dim, action_dim):
        """Shape checks that need the model dimensions"""
        if not self.explicit:
            return []
        errors = []
        for name in ('weights', 'means', 'stds'):
            if getattr(self, name).data is None:
                errors.append((name, 'is required when an explicit mixture is given'))
        if errors or self.errors:
            return errors
        k = len(np.atleast_1d(self.weights.data))
        means = np.atleast_2d(np.asarray(self.means.data, dtype=np.float64))
        if means.shape != (k, action_dim):
            errors.append(('means', f"expected shape {[k, action_dim]}, got {list(means.shape)}"))
        if np.atleast_1d(np.asarray(self.stds.data)).shape != (k,):
            errors.append(('stds', f"expected {k} entries"))
        if self.slopes.data is not None:
            slopes = np.asarray(self.slopes.data, dtype=np.float64)
            if slopes.shape != (k, action_dim, state_dim):
                errors.append(('slopes', f"expected shape {[k, action_dim, state_dim]}, got {list(slopes.shape)}"))
        return errors

    def build(self, state_dim, action_dim):
        if self.explicit:
            means = np.atleast_2d(np.asarray(self.means.data, dtype=np.float64))
            slopes = self.slopes.data
            if slopes is None:
                slopes = np.zeros(means.shape + (state_dim,))
            return GaussianMixturePolicy(weights=np.atleast_1d(self.weights.data), mean_offsets=means,
                                         mean_slopes=slopes, stds=np.atleast_1d(self.stds.data))
        return sample_behavior_policy(action_dim, state_dim, n_components=self.n_components.data,
                                      mean_low=self.mean_low.data, mean_high=self.mean_high.data,
                                      variance_low=self.variance_low.data, variance_high=self.variance_high.data,
                                      seed=self.seed.data)


class SimulateForm(Form):
    n_trajectories = ValueField('Trajectories', default=10000, validators=[Required(), Integer(), in_range(0)])
    seed = ValueField('Seed', default=0, validators=[Required(), Integer(), in_range(0)])
    x0_low = ValueField('Initial state low', default=0.05, validators=[Required(), Number()])
    x0_high = ValueField('Initial state high', default=0.15, validators=[Required(), Number()])
    mode = ValueField('Mode', default='effective', validators=[Required(), AnyOf(list(MODES))])

    def validate_x0_high(self, field):
        if isinstance(self.x0_low.data, numbers.Real) and field.data < self.x0_low.data:
            raise ValidationError('must not be below x0_low')


class TrainForm(Form):
    batch_size = ValueField('Batch size', default=256, validators=[Required(), Integer(), in_range(1)])
    epochs = ValueField('Epochs', default=30, validators=[Required(), Integer(), in_range(0)])
    learning_rate = ValueField('Learning rate', default=1e-3,
                               validators=[Required(), Number(), Positive()])
    lr_decay_every = ValueField('Decay period', default=5, validators=[Required(), Integer(), in_range(0)])
    lr_decay_factor = ValueField('Decay factor', default=0.5,
                                 validators=[Required(), Number(), Positive(), in_range(max=1)])
    lr_floor = ValueField('Learning rate floor', default=1e-5,
                          validators=[Required(), Number(), Positive()])
    weight_decay = ValueField('Weight decay', default=1e-3, validators=[Required(), Number(), in_range(0)])
    nu_squared = ValueField('nu^2', default=100.0, validators=[Required(), Number(), in_range(0)])
    adam_beta1 = ValueField('Adam beta1', default=0.9, validators=[Required(), Number(), in_range(0, 1)])
    adam_beta2 = ValueField('Adam beta2', default=0.999, validators=[Required(), Number(), in_range(0, 1)])
    adam_eps = ValueField('Adam epsilon', default=1e-8, validators=[Required(), Number(), Positive()])
    seed = ValueField('Seed', default=0, validators=[Required(), Integer(), in_range(0)])
    checkpoint_every = ValueField('Checkpoint period', default=0, validators=[Required(), Integer(), in_range(0)])
    grad_clip = ValueField('Gradient clip', validators=[Nullable(), Number(), Positive()])
    hidden_layers = ValueField('Hidden layers', default=(64, 64, 64), validators=[Required()])
    activation = ValueField('Activation', default='softplus',
                            validators=[Required(), AnyOf(['softplus', 'tanh', 'sin'])])
    whiten_inputs = ValueField('Whiten inputs', default=False, validators=[Required(), Boolean()])

    def validate_hidden_layers(self, field):
        value = field.data
        if not isinstance(value, (list, tuple)) or not value:
            raise ValidationError('must be a non-empty list of layer widths')
        for i, width in enumerate(value):
            if isinstance(width, bool) or not isinstance(width, numbers.Integral) or width < 1:
                raise ValidationError(_element_message([i], 'must be a positive integer'))

    def build(self):
        return TrainingConfig(
            batch_size=self.batch_size.data,
            epochs=self.epochs.data,
            learning_rate=float(self.learning_rate.data),
            lr_decay_every=self.lr_decay_every.data,
            lr_decay_factor=float(self.lr_decay_factor.data),
            lr_floor=float(self.lr_floor.data),
            weight_decay=float(self.weight_decay.data),
            nu_squared=float(self.nu_squared.data),
            betas=(float(self.adam_beta1.data), float(self.adam_beta2.data)),
            eps=float(self.adam_eps.data),
            seed=self.seed.data,
            checkpoint_every=self.checkpoint_every.data,
            grad_clip=None if self.grad_clip.data is None else float(self.grad_clip.data),
            hidden_layers=tuple(self.hidden_layers.data),
            activation=self.activation.data,
            whiten_inputs=self.whiten_inputs.data,
        )


class EvaluateForm(Form):
    n_mc = ValueField('Monte Carlo paths', default=5000, validators=[Required(), Integer(), in_range(1)])
    seed = ValueField('Seed', default=1, validators=[Required(), Integer(), in_range(0)])
    n_kl = ValueField('KL samples per state', default=16, validators=[Required(), Integer(), in_range(1)])
    mode = ValueField('Mode', default='effective', validators=[Required(), AnyOf(list(MODES))])
    start_x = ValueField('Start state', validators=[Nullable(), ArrayLike()])
    start_C = ValueField('Start cost', default=0.0, validators=[Required(), Number()])
    start_t = ValueField('Start time', default=0.0, validators=[Required(), Number(), in_range(0)])


@dataclass(frozen=True)
class SimulateSettings:
    n_trajectories: int
    seed: int
    x0_low: float
    x0_high: float
    mode: str

    def x0_sampler(self):
        return uniform_x0_sampler(self.x0_low, self.x0_high)


@dataclass(frozen=True)
class EvaluateSettings:
    n_mc: int
    seed: int
    n_kl: int
    mode: str
    start_x: tuple = None
    start_C: float = 0.0
    start_t: float = 0.0

    def start(self, spec, x0_sampler):
        if self.start_x is None:
            x = np.full(spec.state_dim, x0_sampler.mean)
        else:
            x = expand_array(self.start_x, (spec.state_dim,))
        return ExtendedState(x=x, C=self.start_C, t=self.start_t).validate(spec)


@dataclass(frozen=True, eq=False)
class RunConfig:
    spec: ModelSpec
    behavior_policy: GaussianMixturePolicy
    simulate: SimulateSettings
    train: TrainingConfig
    evaluate: EvaluateSettings
    raw: dict

    @property
    def fingerprint(self):
        return spec_fingerprint(self.spec, self.behavior_policy)


class RunConfigForm(Form):
    model = FormField(ModelForm)
    behavior_policy = FormField(BehaviorPolicyForm)
    simulate = FormField(SimulateForm)
    train = FormField(TrainForm)
    evaluate = FormField(EvaluateForm)

    def validate(self, extra_validators=None):
        valid = super().validate(extra_validators=extra_validators)
        self.section_errors = []
        model = self.model.form
        if not model.errors:
            n, m = model.state_dim.data, model.action_dim.data
            for name, message in self.behavior_policy.form.cross_errors(n, m):
                self.section_errors.append((f"/behavior_policy/{name}", message))
            start_x = self.evaluate.form.start_x
            if start_x.data is not None and not start_x.errors:
                try:
                    _check_shape(start_x, (n,))
                except ValidationError as error:
                    self.section_errors.append(('/evaluate/start_x', str(error)))
            start_t = self.evaluate.form.start_t
            if not start_t.errors and start_t.data > model.horizon.data:
                self.section_errors.append(('/evaluate/start_t', 'must not exceed the horizon'))
        return valid and not self.section_errors

    def pointer_errors(self):
        errors = list(_flatten_errors(self.errors, ''))
        errors.extend(getattr(self, 'section_errors', []))
        return errors


def _escape(key):
    return str(key).replace('~', '~0').replace('/', '~1')


def _flatten_errors(errors, prefix):
    for key, value in errors.items():
        pointer = prefix if key is None else f"{prefix}/{_escape(key)}"
        if isinstance(value, dict):
            yield from _flatten_errors(value, pointer)
            continue
        for message in value:
            match = _ELEMENT_POINTER.match(str(message))
            if match:
                yield pointer + match.group(1), match.group(2)
            else:
                yield pointer, str(message)


def unknown_key_errors(raw, form_class=RunConfigForm, prefix=''):
    """Pointers to every key the schema does not define"""
    if not isinstance(raw, dict):
        return [(prefix or '/', 'must be an object')]
    errors = []
    fields = {name: field for name, field in form_class()._fields.items()}
    for key, value in raw.items():
        pointer = f"{prefix}/{_escape(key)}"
        if key not in fields:
            errors.append((pointer, 'unknown key'))
        elif isinstance(fields[key], FormField):
            errors.extend(unknown_key_errors(value, fields[key].form_class, pointer))
    return errors


def parse_config(raw):
    """Validate a decoded config document and build the run objects"""
    errors = unknown_key_errors(raw)
    if errors:
        raise ConfigError(errors)
    form = RunConfigForm(data=raw)
    if not form.validate():
        raise ConfigError(form.pointer_errors())

    model_form = form.model.form
    try:
        spec = model_form.build()
        policy = form.behavior_policy.form.build(spec.state_dim, spec.action_dim)
        train = form.train.form.build()
    except ValueError as error:
        raise ConfigError([('/', str(error))])

    sim = form.simulate.form
    simulate = SimulateSettings(n_trajectories=sim.n_trajectories.data, seed=sim.seed.data,
                                x0_low=float(sim.x0_low.data), x0_high=float(sim.x0_high.data),
                                mode=sim.mode.data)
    ev = form.evaluate.form
    start_x = ev.start_x.data
    evaluate = EvaluateSettings(n_mc=ev.n_mc.data, seed=ev.seed.data, n_kl=ev.n_kl.data, mode=ev.mode.data,
                                start_x=None if start_x is None else np.asarray(start_x, dtype=np.float64).tolist(),
                                start_C=float(ev.start_C.data), start_t=float(ev.start_t.data))
    return RunConfig(spec=spec, behavior_policy=policy, simulate=simulate, train=train, evaluate=evaluate,
                     raw=raw)


def load_config(source):
    """Load a run configuration from a path or an already decoded dict"""
    if isinstance(source, dict):
        return parse_config(source)
    try:
        with open(source) as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as error:
        raise ConfigError([('/', f"invalid JSON: {error}")])
    config = parse_config(raw)
    logger.info(f"Loaded configuration {source} (fingerprint {config.fingerprint[:12]})")
    return config
