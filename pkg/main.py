import functools
import json
import os

import click

from app import debug_log, set_threads
from evaluator import compare_policies, parse_grid, policy_slice_export, write_comparison, write_return_distribution
from exceptions import EXIT_NUMERIC, ConfigError, CurvatureCollapse, DimensionMismatch, FingerprintMismatch, SoftHJBError
from forms import load_config
from simulator import dataset_summary, read_dataset, simulate_dataset, write_dataset
from trainer import evaluate_loss, load_training_checkpoint, train
from value_net import initialize, load_checkpoint
from verify_oracles import LEVELS, run_checks, write_report


def reports_errors(command):
    """Turn library errors into the documented exit codes"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            for pointer, message in e.errors:
                click.echo(f"config error at {pointer or '/'}: {message}", err=True)
            debug_log("Configuration rejected", level='error')
            click.get_current_context().exit(e.exit_code)
        except CurvatureCollapse as e:
            debug_log(f"Posterior policy collapsed at state {e.state}", error=e)
            click.get_current_context().exit(e.exit_code)
        except SoftHJBError as e:
            debug_log(f"{command.__name__} failed", error=e)
            click.get_current_context().exit(e.exit_code)
    return wrapper


@click.group()
def cli():
    """Offline soft-HJB control toolkit"""


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.option('--seed', type=int, default=None, help='Overrides simulate.seed from the config')
@click.option('--threads', type=int, default=None)
@reports_errors
def simulate(config_path, out, seed, threads):
    """Simulate a behaviour dataset"""
    set_threads(threads)
    config = load_config(config_path)
    settings = config.simulate
    seed = settings.seed if seed is None else seed
    dataset = simulate_dataset(config.spec, config.behavior_policy, settings.n_trajectories, seed,
                               settings.x0_sampler(), mode=settings.mode)
    write_dataset(dataset, out)
    click.echo(json.dumps(dataset_summary(dataset), indent=2))


@cli.command('train')
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--data', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@click.option('--metrics', type=click.Path(dir_okay=False), default=None,
              help='Metrics CSV path (default: <out>.metrics.csv)')
@click.option('--allow-mismatch', is_flag=True, help='Train even if the dataset fingerprint differs')
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--threads', type=int, default=None)
@reports_errors
def train_command(config_path, data, out, metrics, allow_mismatch, resume, threads):
    """Fit the value network to a dataset"""
    set_threads(threads)
    config = load_config(config_path)
    dataset = read_dataset(data)
    if dataset.spec_fingerprint != config.fingerprint:
        if not allow_mismatch:
            raise FingerprintMismatch(config.fingerprint, dataset.spec_fingerprint)
        debug_log("Dataset fingerprint differs from the config; continuing", level='warning')
    dataset.check_grid(config.spec)

    settings = config.train
    if resume:
        net, state = load_training_checkpoint(resume)
    else:
        architecture = {'input_dim': config.spec.state_dim + 2, 'hidden_layers': list(settings.hidden_layers),
                        'output_dim': 1}
        net, state = initialize(architecture, settings.seed, settings.activation), None

    net, log = train(net, dataset, config.spec, config.behavior_policy, settings, checkpoint_path=out,
                     resume_state=state, replay_dir=os.path.dirname(os.path.abspath(out)))
    log.write_csv(metrics or f"{out}.metrics.csv")
    if len(dataset):
        final = evaluate_loss(net, dataset, config.spec, config.behavior_policy, settings.nu_squared)
        click.echo(f"final loss {final:.6g} over {len(dataset)} trajectories")


@cli.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--model', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--out-dir', required=True, type=click.Path(file_okay=False))
@click.option('--threads', type=int, default=None)
@reports_errors
def evaluate(config_path, model, out_dir, threads):
    """Compare behaviour and extracted policies by Monte Carlo"""
    set_threads(threads)
    config = load_config(config_path)
    net, _ = load_checkpoint(model)
    settings = config.evaluate
    start = settings.start(config.spec, config.simulate.x0_sampler())
    comparison = compare_policies(config.spec, config.behavior_policy, net, start, settings.n_mc,
                                  settings.seed, n_kl=settings.n_kl, mode=settings.mode)

    os.makedirs(out_dir, exist_ok=True)
    for name, distribution in comparison['_distributions'].items():
        write_return_distribution(distribution, os.path.join(out_dir, f"returns_{name}.csv"),
                                  os.path.join(out_dir, f"returns_{name}.json"))
    write_comparison(comparison, os.path.join(out_dir, 'comparison.json'))
    improvement = comparison['improvement']
    click.echo(f"improvement {improvement['difference']:.6g} "
               f"(combined standard error {improvement['combined_standard_error']:.3g})")


@cli.command('slice')
@click.option('--model', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--dim', required=True, type=int)
@click.option('--grid', required=True, help='lo:hi:n')
@click.option('--out', required=True, type=click.Path(dir_okay=False))
@reports_errors
def slice_command(model, config_path, dim, grid, out):
    """Export the posterior mixture along one state coordinate"""
    config = load_config(config_path)
    if not 0 <= dim < config.spec.state_dim:
        raise DimensionMismatch(f"--dim {dim} outside [0, {config.spec.state_dim - 1}]")
    try:
        values = parse_grid(grid)
    except ValueError as e:
        raise ConfigError([('/grid', str(e))])
    net, _ = load_checkpoint(model)
    anchor = config.evaluate.start(config.spec, config.simulate.x0_sampler())
    table = policy_slice_export(net, config.behavior_policy, config.spec, dim, values, anchor)
    table.to_csv(out, index=False, float_format='%.17g')
    click.echo(f"wrote {len(table)} rows to {out}")


@cli.command()
@click.option('--level', type=click.Choice(LEVELS), default='quick')
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='JSON report path')
@reports_errors
def verify(level, out):
    """Run the oracle checks"""
    results = run_checks(level)
    if out:
        write_report(results, out)
    click.echo(json.dumps([r.to_dict() for r in results], indent=2))
    if not all(r.passed for r in results):
        click.get_current_context().exit(EXIT_NUMERIC)


if __name__ == "__main__":
    cli()
