from __future__ import annotations

import functools
import logging
from pathlib import Path

import click

from rdmd_lab import experiments
from rdmd_lab.config import ExperimentConfig, load_config
from rdmd_lab.errors import RdmdError
from rdmd_lab.logging_setup import setup_logger
from rdmd_lab.settings import Settings, load_settings

log = logging.getLogger(__name__)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RdmdError as e:
            raise click.ClickException(str(e)) from e

    return wrapper


def _resolve(settings: Settings, config: str | None, seed: int | None, out: str | None, command: str, **rdmd) -> tuple[ExperimentConfig, Path]:
    """Precedence: command-line flags, then RDMD_* environment, then the config file."""
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None or settings.out_dir is not None:
        overrides["output"] = {"dir": out if out is not None else settings.out_dir}
    rdmd = {k: v for k, v in rdmd.items() if v is not None}
    if rdmd:
        overrides["rdmd"] = rdmd
    if config is None and Path(settings.config_path).exists():
        config = settings.config_path
    cfg = load_config(config, overrides)
    out_dir = Path(out) if out is not None else Path(cfg.output.dir) / command
    return cfg, out_dir


def config_options(fn):
    fn = click.option("--out", metavar="DIR", help="Output directory (overrides output.dir).")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), metavar="U64", help="Seed for every section.")(fn)
    fn = click.option("--config", "config", metavar="PATH", help="Experiment config (JSON).")(fn)
    return fn


def target_options(fn):
    fn = click.option("--analytic-target", metavar="SPEC", help="Analytic target: 8gaussians[:radius,std] or gaussian[:std].")(fn)
    fn = click.option("--target", metavar="CKPT", type=click.Path(dir_okay=False), help="Pretrained target denoiser checkpoint.")(fn)
    return fn


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx: click.Context, verbose: bool) -> None:
    """Regularized distribution matching distillation lab."""
    settings = load_settings()
    setup_logger(logging.DEBUG if verbose else settings.log_level)
    ctx.obj = settings


@main.command("train-diffusion")
@config_options
@click.pass_obj
@_handle_errors
def train_diffusion(settings: Settings, config, seed, out):
    """Pretrain the target denoiser by denoising score matching."""
    cfg, out_dir = _resolve(settings, config, seed, out, "train-diffusion")
    report = experiments.run_train_diffusion(cfg, out_dir, settings.record_wallclock)
    click.echo(f"score relative L2: {report['score_relative_l2']}  pf-ode energy distance: {report['pf_ode_energy_distance']:.4f}")


@main.command("train-rdmd")
@config_options
@target_options
@click.option("--lambda", "lam", type=float, metavar="F64", help="Transport cost weight.")
@click.option("--sigma-init", type=float, metavar="F64", help="Noise level the generator is copied at.")
@click.option("--init", "init_checkpoint", type=click.Path(dir_okay=False), help="Denoiser to start fake and generator from.")
@click.pass_obj
@_handle_errors
def train_rdmd(settings: Settings, config, seed, out, target, analytic_target, lam, sigma_init, init_checkpoint):
    """Distill a one-step generator with transport-cost regularization."""
    cfg, out_dir = _resolve(settings, config, seed, out, "train-rdmd", lam=lam, sigma_init=sigma_init)
    summary = experiments.run_train_rdmd(cfg, out_dir, target, analytic_target, init_checkpoint, settings.record_wallclock)
    click.echo(
        f"lambda={summary['lambda']:g} transport_cost_rms={summary['transport_cost_rms']:.4f} "
        f"energy_distance={summary['energy_distance']:.4f}"
    )


@main.command()
@config_options
@click.option("--lambda", "lambdas", type=float, multiple=True, metavar="F64", help="Surface per lambda (repeatable).")
@click.pass_obj
@_handle_errors
def surface(settings: Settings, config, seed, out, lambdas):
    """Evaluate the linear-Gaussian loss surface over (r, alpha)."""
    cfg, out_dir = _resolve(settings, config, seed, out, "surface")
    summary = experiments.run_surface(cfg, out_dir, tuple(lambdas) or None)
    for row in summary.to_dict("records"):
        click.echo(f"lambda={row['lambda']:g} argmin r={row['r_argmin']:.4f} alpha={row['alpha_argmin']:.4f}")


@main.command("eval")
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Generator checkpoint.")
@click.option("--sweep-csv", type=click.Path(dir_okay=False), help="Sweep table to add this row to.")
@click.pass_obj
@_handle_errors
def eval_(settings: Settings, config, seed, out, checkpoint, sweep_csv):
    """Metrics for a generator checkpoint on freshly drawn data."""
    cfg, out_dir = _resolve(settings, config, seed, out, "eval")
    record = experiments.run_eval(cfg, out_dir, checkpoint, cfg.seed, sweep_csv)
    click.echo(
        f"transport_cost_rms={record['transport_cost_rms']:.4f} energy_distance={record['energy_distance']:.4f} "
        f"sliced_w2={record['sliced_w2']:.4f} crossings={record['crossing_count']}"
    )


@main.command()
@click.argument("pairs_csv", type=click.Path(dir_okay=False))
@click.option("--out", "out_svg", required=True, metavar="SVG", help="Figure path.")
@click.option("--reference", type=click.Path(dir_okay=False), help="Target samples CSV drawn behind the pairs.")
@click.option("--title")
@_handle_errors
def plot(pairs_csv, out_svg, reference, title):
    """Draw a pair set as points joined by input->output segments."""
    path = experiments.run_plot(pairs_csv, out_svg, reference, title)
    click.echo(str(path))


@main.command()
@config_options
@target_options
@click.option("--lambda", "lambdas", type=float, multiple=True, metavar="F64", help="Lambda values (repeatable).")
@click.option("--sigma-init", "sigma_inits", type=float, multiple=True, metavar="F64", help="Generator sigma_init values (repeatable).")
@click.option("--workers", type=click.IntRange(1), help="Concurrent runs (default RDMD_WORKERS).")
@click.pass_obj
@_handle_errors
def sweep(settings: Settings, config, seed, out, target, analytic_target, lambdas, sigma_inits, workers):
    """Train and evaluate one generator per (sigma_init, lambda)."""
    cfg, out_dir = _resolve(settings, config, seed, out, "sweep")
    df = experiments.run_sweep(
        cfg, out_dir, target, analytic_target,
        tuple(lambdas) or None, tuple(sigma_inits) or None,
        workers or settings.workers, settings.record_wallclock,
    )
    click.echo(df.to_string(index=False))


if __name__ == "__main__":
    main()
