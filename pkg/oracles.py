"""
Brute-force reference computations written directly in numpy and scipy.

Nothing here calls into the torch code paths it is used to check: policies,
specs and value gradients are unpacked into plain arrays first.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special, stats

from exceptions import QuadratureNonConvergent

logger = logging.getLogger(__name__)

TAIL_WIDTH = 12.0
MAX_QUADRATURE_DIM = 3


def _array(value):
    if hasattr(value, 'detach'):
        value = value.detach().numpy()
    return np.asarray(value, dtype=np.float64)


def _gradients(vg):
    return _array(vg.grad_x), float(_array(vg.grad_C))


def _gain(spec, x):
    return np.asarray(spec.drift_action_offset) + x[:, None] * np.asarray(spec.drift_action_linear)


def _state_drift(spec, x):
    return np.asarray(spec.drift_const_offset) + np.asarray(spec.drift_const_linear) @ x


def _component(policy, k, x):
    mean = np.asarray(policy.mean_offsets[k]) + np.asarray(policy.mean_slopes[k]) @ x
    return mean, float(policy.stds[k]) ** 2


def _tilt(spec, x, grad_x, grad_C):
    """(q, m): coefficient of a^2/2 and of a in the tilting exponent, before the beta factor"""
    q = spec.cost_action_coeff * float(x @ x) * grad_C
    m = _gain(spec, x).T @ grad_x
    return q, m


def _log_integral_1d(mean, variance, beta, q, m_i, tail_width):
    """log of int N(a | mean, variance) exp(-beta (q a^2 / 2 + m_i a)) da"""
    precision = 1.0 / variance + beta * q
    if precision <= 0:
        raise QuadratureNonConvergent(f"tilted integrand is not integrable (precision {precision:.3e})")

    def log_integrand(a):
        return stats.norm.logpdf(a, loc=mean, scale=np.sqrt(variance)) - beta * (0.5 * q * a * a + m_i * a)

    mode = optimize.minimize_scalar(lambda a: -log_integrand(a), bracket=(mean - 1.0, mean + 1.0)).x
    peak = log_integrand(mode)
    half = tail_width / np.sqrt(precision)
    value, error = integrate.quad(lambda a: np.exp(log_integrand(a) - peak), mode - half, mode + half,
                                  epsabs=0.0, epsrel=1e-12, limit=400, points=[mode])
    if not np.isfinite(value) or value <= 0 or error > 1e-9 * value:
        raise QuadratureNonConvergent(f"quadrature error estimate {error:.3e} for value {value:.3e}")
    return np.log(value) + peak


def partition_quadrature(policy, k, vg, x, spec):
    """
    -(1/beta) log of the tilted Gaussian integral of component k, integrated
    coordinate by coordinate. The +-12 standard deviation window is checked
    against a 14 standard deviation window.
    """
    x = _array(x)
    grad_x, grad_C = _gradients(vg)
    mean, variance = _component(policy, k, x)
    if len(mean) > MAX_QUADRATURE_DIM:
        raise ValueError(f"quadrature oracle supports at most {MAX_QUADRATURE_DIM} action dimensions")
    beta = spec.inverse_temperature
    q, m = _tilt(spec, x, grad_x, grad_C)
    log_z = 0.0
    for i in range(len(mean)):
        narrow = _log_integral_1d(mean[i], variance, beta, q, m[i], TAIL_WIDTH)
        wide = _log_integral_1d(mean[i], variance, beta, q, m[i], TAIL_WIDTH + 2.0)
        if abs(narrow - wide) > 1e-10 * max(1.0, abs(wide)):
            raise QuadratureNonConvergent(f"tail truncation not converged in action dimension {i}")
        log_z += wide
    return -log_z / beta


def mixture_partition_quadrature(policy, vg, x, spec):
    """
    -(1/beta) log Z with Z = int pi0(a|x) exp(-beta (q |a|^2 / 2 + m.a)) da taken
    over the whole mixture density at once, in one or two action dimensions.
    """
    x = _array(x)
    grad_x, grad_C = _gradients(vg)
    beta = spec.inverse_temperature
    q, m = _tilt(spec, x, grad_x, grad_C)
    dim = len(m)
    if dim > 2:
        raise ValueError("mixture quadrature supports at most 2 action dimensions")
    log_w = np.log(np.asarray(policy.weights))
    components = [_component(policy, k, x) for k in range(len(log_w))]
    means = np.array([mean for mean, _ in components])
    variances = np.array([variance for _, variance in components])
    precisions = 1.0 / variances + beta * q
    if np.any(precisions <= 0):
        raise QuadratureNonConvergent("tilted mixture is not integrable")
    centers = (means / variances[:, None] - beta * m) / precisions[:, None]
    scales = 1.0 / np.sqrt(precisions)

    def log_integrand(a):
        sq = ((a - means) ** 2).sum(-1)
        log_prior = special.logsumexp(log_w - 0.5 * dim * np.log(2 * np.pi * variances) - 0.5 * sq / variances)
        return log_prior - beta * (0.5 * q * (a @ a) + m @ a)

    peak = max(log_integrand(c) for c in centers)
    bounds = [(float((centers[:, i] - TAIL_WIDTH * scales).min()), float((centers[:, i] + TAIL_WIDTH * scales).max()))
              for i in range(dim)]
    # the innermost coordinate comes first and is integrated tighter than the outer one
    opts = [{'epsabs': 0.0, 'epsrel': 1e-11 if i == 0 else 1e-9, 'limit': 200, 'points': centers[:, i].tolist()}
            for i in range(dim)]
    value, error = integrate.nquad(lambda *a: np.exp(log_integrand(np.array(a)) - peak), bounds, opts=opts)
    if not np.isfinite(value) or value <= 0 or error > 1e-7 * value:
        raise QuadratureNonConvergent(f"mixture quadrature error estimate {error:.3e} for value {value:.3e}")
    return -(np.log(value) + peak) / beta


def closed_form_gaussian_integral(mean, covariance, quad_matrix, linear):
    """
    log int N(a | mean, covariance) exp(-a^T C a / 2 - D^T a) da for arbitrary C, D
    (finite when covariance^-1 + C is positive definite).
    """
    mean, covariance = np.asarray(mean, float), np.atleast_2d(np.asarray(covariance, float))
    C, D = np.atleast_2d(np.asarray(quad_matrix, float)), np.asarray(linear, float)
    precision = np.linalg.inv(covariance)
    combined = precision + C
    sign, logdet = np.linalg.slogdet(np.eye(len(mean)) + covariance @ C)
    if sign <= 0:
        raise QuadratureNonConvergent("I + Sigma C is not positive definite")
    shift = precision @ mean - D
    return -0.5 * logdet + 0.5 * shift @ np.linalg.solve(combined, shift) - 0.5 * mean @ precision @ mean


def closed_form_component_hamiltonian(policy, k, vg, x, spec):
    """Component Hamiltonian via the general multivariate Gaussian integral formula"""
    x = _array(x)
    grad_x, grad_C = _gradients(vg)
    mean, variance = _component(policy, k, x)
    beta = spec.inverse_temperature
    q, m = _tilt(spec, x, grad_x, grad_C)
    dim = len(mean)
    log_z = closed_form_gaussian_integral(mean, variance * np.eye(dim), beta * q * np.eye(dim), beta * m)
    return -log_z / beta


def high_temperature_hamiltonian(policy, k, vg, x, spec):
    """Component Hamiltonian expanded to first order in beta"""
    x = _array(x)
    grad_x, grad_C = _gradients(vg)
    u, variance = _component(policy, k, x)
    beta = spec.inverse_temperature
    q, m = _tilt(spec, x, grad_x, grad_C)
    dim = len(u)
    uu, um, mm = float(u @ u), float(u @ m), float(m @ m)
    zeroth = 0.5 * q * uu + um + 0.5 * dim * variance * q
    first = -0.5 * variance * mm - 0.5 * variance * q * (q * uu + 2.0 * um) - 0.25 * dim * variance ** 2 * q ** 2
    return zeroth + beta * first


def reference_posterior(policy, grad_x, grad_C, x, spec):
    """Posterior weights, means, variances and component Hamiltonians by direct formulas"""
    x, grad_x = _array(x), _array(grad_x)
    beta = spec.inverse_temperature
    q, m = _tilt(spec, x, grad_x, float(grad_C))
    hamiltonians, means, variances = [], [], []
    for k in range(len(policy.weights)):
        u, variance = _component(policy, k, x)
        s = 1.0 + beta * variance * q
        dim = len(u)
        hamiltonians.append(0.5 * (q * u @ u + 2 * u @ m - beta * variance * m @ m) / s
                            + 0.5 * dim / beta * np.log(s))
        means.append((u - beta * variance * m) / s)
        variances.append(variance / s)
    hamiltonians = np.array(hamiltonians)
    log_w = np.log(np.asarray(policy.weights)) - beta * hamiltonians
    weights = np.exp(log_w - special.logsumexp(log_w))
    return {'weights': weights, 'means': np.array(means), 'variances': np.array(variances),
            'hamiltonians': hamiltonians, 'free_energy': -special.logsumexp(log_w) / beta}


def posterior_moments_quadrature(policy, vg, x, spec, n_grid=20001):
    """
    Weights, means and variances of the tilted mixture fitted by Simpson
    integration on a fine grid (one action dimension).
    """
    x = _array(x)
    grad_x, grad_C = _gradients(vg)
    beta = spec.inverse_temperature
    q, m = _tilt(spec, x, grad_x, grad_C)
    if len(m) != 1:
        raise ValueError("grid moment fitting supports a single action dimension")
    log_masses, means, variances = [], [], []
    for k in range(len(policy.weights)):
        u, variance = _component(policy, k, x)
        precision = 1.0 / variance + beta * q
        if precision <= 0:
            raise QuadratureNonConvergent("tilted component is not integrable")
        center = (u[0] / variance - beta * m[0]) / precision
        half = TAIL_WIDTH / np.sqrt(precision)
        grid = np.linspace(center - half, center + half, n_grid)
        log_g = stats.norm.logpdf(grid, loc=u[0], scale=np.sqrt(variance)) - beta * (0.5 * q * grid ** 2 + m[0] * grid)
        peak = log_g.max()
        g = np.exp(log_g - peak)
        mass = integrate.simpson(g, x=grid)
        mean = integrate.simpson(grid * g, x=grid) / mass
        var = integrate.simpson((grid - mean) ** 2 * g, x=grid) / mass
        log_masses.append(np.log(policy.weights[k]) + np.log(mass) + peak)
        means.append(mean)
        variances.append(var)
    log_masses = np.array(log_masses)
    weights = np.exp(log_masses - special.logsumexp(log_masses))
    return {'weights': weights, 'means': np.array(means), 'variances': np.array(variances)}


def transition_density(spec, x, x_next, mean_action, dt):
    """Log of the Euler-Maruyama Gaussian transition density with drift mu0 + mu1 <a>"""
    x, x_next, mean_action = _array(x), _array(x_next), _array(mean_action)
    drift = _state_drift(spec, x) + _gain(spec, x) @ mean_action
    scale = np.asarray(spec.volatility) * np.sqrt(dt)
    return float(stats.norm.logpdf(x_next, loc=x + drift * dt, scale=scale).sum())


def discrete_action(drift, sigma, delta_x, dt):
    """sum_i (dx_i - drift_i dt)^2 / (2 sigma_i^2 dt)"""
    drift, sigma, delta_x = _array(drift), _array(sigma), _array(delta_x)
    return float(((delta_x - drift * dt) ** 2 / (2.0 * sigma ** 2 * dt)).sum())


def general_delta_s(drift_new, drift_old, sigma, delta_x, dt):
    """Action difference S[drift_new] - S[drift_old] of one observed transition"""
    return discrete_action(drift_new, sigma, delta_x, dt) - discrete_action(drift_old, sigma, delta_x, dt)


def girsanov_delta_s_1d(mu, sigma, delta_x, dt):
    """One-dimensional action difference against a zero reference drift"""
    return -mu / sigma ** 2 * delta_x + 0.5 * mu ** 2 / sigma ** 2 * dt


def _mean_actions(policy, grad_x, grad_C, x, spec):
    posterior = reference_posterior(policy, grad_x, grad_C, x, spec)
    optimal = posterior['weights'] @ posterior['means']
    prior_means = np.array([_component(policy, k, x)[0] for k in range(len(policy.weights))])
    prior = np.asarray(policy.weights) @ prior_means
    return optimal, prior, posterior


def reference_delta_s(spec, policy, grad_x, grad_C, x, x_next, dt):
    x, x_next = _array(x), _array(x_next)
    optimal, prior, _ = _mean_actions(policy, grad_x, grad_C, x, spec)
    gain, base = _gain(spec, x), _state_drift(spec, x)
    return general_delta_s(base + gain @ optimal, base + gain @ prior, spec.volatility, x_next - x, dt)


def reference_step_residual(spec, policy, J, J_next, grad_x, grad_C, x, x_next, dt):
    """J_next - J - H_HJ dt, with J_next already replaced by U(C_T) on terminal steps"""
    x, x_next, grad_x = _array(x), _array(x_next), _array(grad_x)
    optimal, _, posterior = _mean_actions(policy, grad_x, grad_C, x, spec)
    drift = _state_drift(spec, x) + _gain(spec, x) @ optimal
    hamiltonian = (-posterior['free_energy'] + spec.discount_rate * J
                   + ((x_next - x) / dt - drift) @ grad_x)
    return J_next - J - hamiltonian * dt


def reference_nll(spec, policy, records, nu_squared):
    """Mean over records of residual^2 / 2 + nu^2 dS; each record is a dict of plain numbers/arrays"""
    total = 0.0
    for r in records:
        residual = reference_step_residual(spec, policy, r['J'], r['J_next'], r['grad_x'], r['grad_C'],
                                           r['x'], r['x_next'], r['dt'])
        mismatch = reference_delta_s(spec, policy, r['grad_x'], r['grad_C'], r['x'], r['x_next'], r['dt'])
        total += 0.5 * residual ** 2 + nu_squared * mismatch
    return total / len(records)


def gaussian_kl_closed_form(mean_p, var_p, mean_q, var_q):
    """KL(N(mean_p, var_p I) || N(mean_q, var_q I))"""
    mean_p, mean_q = np.atleast_1d(_array(mean_p)), np.atleast_1d(_array(mean_q))
    dim = len(mean_p)
    return 0.5 * (dim * var_p / var_q + float(((mean_q - mean_p) ** 2).sum()) / var_q - dim
                  + dim * np.log(var_q / var_p))


@dataclass
class FiniteDifferenceReport:
    max_relative_error: float
    relative_errors: np.ndarray
    numeric: np.ndarray
    analytic: np.ndarray

    def passed(self, tolerance):
        return bool(self.max_relative_error < tolerance)


def finite_difference_check(fn, point, step=1e-5, analytic=None, floor=1e-6):
    """
    Central differences of scalar `fn` at `point` against `analytic` (an array,
    a callable returning one, or None when `fn` returns (value, gradient)).
    """
    point = _array(point).copy()
    if analytic is None:
        analytic = fn(point)[1]
        value_fn = lambda p: fn(p)[0]  # noqa: E731
    else:
        value_fn = fn
        if callable(analytic):
            analytic = analytic(point)
    analytic = _array(analytic).reshape(-1)
    numeric = np.zeros_like(point, dtype=np.float64).reshape(-1)
    flat = point.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = float(value_fn(flat.reshape(point.shape)))
        flat[i] = original - step
        minus = float(value_fn(flat.reshape(point.shape)))
        flat[i] = original
        numeric[i] = (plus - minus) / (2.0 * step)
    denominator = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    errors = np.abs(numeric - analytic) / denominator
    return FiniteDifferenceReport(max_relative_error=float(errors.max()) if errors.size else 0.0,
                                  relative_errors=errors, numeric=numeric, analytic=analytic)
