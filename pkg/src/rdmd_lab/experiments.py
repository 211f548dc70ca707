"""
One function per CLI command. Each takes a resolved ``ExperimentConfig`` and an
output directory, writes ``resolved_config.json`` first and returns the
summary record it also writes to disk.
"""
from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from rdmd_lab import checkpoint as ckpt_io
from rdmd_lab import reports
from rdmd_lab.config import ExperimentConfig, write_resolved_config
from rdmd_lab.data import PairSet, Rng, build_distribution, make_sampler, parse_distribution_spec
from rdmd_lab.diffusion import pf_ode_sample, score_error, train_dsm
from rdmd_lab.errors import ConfigError, ValidationError
from rdmd_lab.metrics import energy_distance, evaluate_pairs
from rdmd_lab.oracles import AnalyticDistribution, GaussianDist, OracleDenoiser, apply_linear_map, ot_map_gaussian, surface_grid
from rdmd_lab.trainer import train_rdmd

log = logging.getLogger(__name__)

DSM_LOG_COLUMNS = ["iteration", "loss", "wallclock_ms"]
RDMD_LOG_COLUMNS = ["iteration", "fake_loss", "transport_cost_sq", "transport_cost_rms", "energy_distance", "wallclock_ms"]
SURFACE_COLUMNS = ["r", "alpha", "kl_term", "cost_term", "total"]
SWEEP_COLUMNS = [
    "run", "lambda", "sigma_init", "seed",
    "transport_cost_rms", "transport_cost_sq", "energy_distance", "sliced_w2", "crossing_count",
]


def build_target(cfg: ExperimentConfig) -> AnalyticDistribution:
    d = cfg.data
    std = d.component_std if d.target == "8gaussians" else d.target_std
    return build_distribution(d.target, dim=d.dim, std=std, radius=d.radius)


def build_source(cfg: ExperimentConfig) -> AnalyticDistribution:
    d = cfg.data
    std = d.component_std if d.source == "8gaussians" else d.source_std
    return build_distribution(d.source, dim=d.dim, std=std, radius=d.radius)


def _prepare(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out)
    return out


def _lam_tag(value: float) -> str:
    return f"{value:g}"


def pretrain_denoiser(cfg: ExperimentConfig, dist: AnalyticDistribution, rng: Rng, record_wallclock: bool = False):
    sampler = make_sampler(dist, cfg.data.n_samples, rng.split("dataset"))
    return train_dsm(cfg.dsm, sampler, cfg.schedule, cfg.network, rng=rng.split("dsm"), record_wallclock=record_wallclock)


def run_train_diffusion(cfg: ExperimentConfig, out_dir: str | Path, record_wallclock: bool = False) -> dict:
    out = _prepare(cfg, out_dir)
    rng = Rng(cfg.dsm.seed)
    target = build_target(cfg)
    result = pretrain_denoiser(cfg, target, rng, record_wallclock)
    reports.write_log_csv(out / "loss.csv", result.log, DSM_LOG_COLUMNS)
    ckpt_io.save_checkpoint(out / "denoiser.ckpt", ckpt_io.from_denoiser(result.net, cfg.dsm.iterations, cfg.dsm.seed))

    # the target is analytic, so the learned score is checked against the exact one
    held_out = target.sample(cfg.eval.n_eval, rng.split("held-out"))
    generated = pf_ode_sample(result.net, cfg.schedule, cfg.eval.n_eval, cfg.eval.ode_steps, rng.split("pf-ode"), cfg.data.dim)
    errors = score_error(result.net, target, cfg.eval.score_sigmas, rng.split("score-error"))
    report = {
        "iterations": cfg.dsm.iterations,
        "final_loss": result.log[-1]["loss"],
        "score_relative_l2": {f"{s:g}": e for s, e in errors.items()},
        "pf_ode_energy_distance": energy_distance(generated, held_out),
        "ode_steps": cfg.eval.ode_steps,
        "seed": cfg.dsm.seed,
    }
    reports.write_json(out / "validation.json", report)
    reports.write_samples_csv(out / "pf_ode_samples.csv", generated)
    return report


def _load_target(cfg: ExperimentConfig, target: str | Path | None, analytic_target: str | None):
    if (target is None) == (analytic_target is None):
        raise ConfigError("give exactly one of a target checkpoint or an analytic target spec")
    if target is not None:
        net = ckpt_io.load_checkpoint(target, cfg.schedule, cfg.network).to_denoiser()
        return net, build_target(cfg), net
    dist = parse_distribution_spec(analytic_target, cfg.data.dim)
    return OracleDenoiser(dist), dist, None


def reference_distribution(cfg: ExperimentConfig, meta: dict[str, str]) -> AnalyticDistribution:
    """Law a generator is scored against: its analytic training target if it had one, else ``data.target``."""
    if meta.get("target_kind") == "analytic":
        return parse_distribution_spec(meta["target"], cfg.data.dim)
    return build_target(cfg)


def held_out_eval(
    cfg: ExperimentConfig,
    gen,
    target_dist: AnalyticDistribution,
    seed: int,
) -> tuple[PairSet, np.ndarray, dict]:
    rng = Rng(seed)
    x = build_source(cfg).sample(cfg.eval.n_eval, rng.split("eval-source"))
    y_ref = target_dist.sample(cfg.eval.n_eval, rng.split("eval-target"))
    pairs = PairSet(x, gen(x))
    if pairs.dim == 2:
        metrics = evaluate_pairs(pairs, y_ref, rng.split("metrics"), cfg.eval.n_projections, cfg.eval.crossing_m)
    else:
        metrics = {"energy_distance": energy_distance(pairs.outputs, y_ref)}
    return pairs, y_ref, metrics


def _ot_error(source: AnalyticDistribution, dist: AnalyticDistribution, pairs: PairSet) -> float | None:
    if not (isinstance(source, GaussianDist) and isinstance(dist, GaussianDist)):
        return None
    m, b = ot_map_gaussian(source, dist)
    ot = apply_linear_map(pairs.inputs, m, b)
    return float(np.mean(np.linalg.norm(pairs.outputs - ot, axis=1) / np.linalg.norm(ot, axis=1)))


def run_train_rdmd(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    target: str | Path | None = None,
    analytic_target: str | None = None,
    init_checkpoint: str | Path | None = None,
    record_wallclock: bool = False,
) -> dict:
    out = _prepare(cfg, out_dir)
    rc = cfg.rdmd
    rng = Rng(rc.seed)
    target_denoiser, target_dist, init_net = _load_target(cfg, target, analytic_target)
    source = build_source(cfg)

    if rc.generator == "mlp" and init_net is None:
        if init_checkpoint is not None:
            init_net = ckpt_io.load_checkpoint(init_checkpoint, cfg.schedule, cfg.network).to_denoiser()
        else:
            log.info("no target network given; pretraining a denoiser on the analytic target")
            pre = pretrain_denoiser(cfg, target_dist, rng.split("pretrain"), record_wallclock)
            init_net = pre.net
            ckpt_io.save_checkpoint(out / "pretrained.ckpt", ckpt_io.from_denoiser(init_net, cfg.dsm.iterations, cfg.dsm.seed))

    source_sampler = make_sampler(source, cfg.data.n_samples, rng.split("source-train"))
    eval_source = source.sample(rc.eval_size, rng.split("monitor-source"))
    eval_target = target_dist.sample(rc.eval_size, rng.split("monitor-target"))
    state = train_rdmd(
        rc,
        source_sampler,
        target_denoiser,
        cfg.schedule,
        eval_source,
        eval_target,
        init_denoiser=init_net,
        source=source if isinstance(source, GaussianDist) else None,
        rng=rng.split("train"),
        record_wallclock=record_wallclock,
    )
    reports.write_log_csv(out / "train_log.csv", state.log, RDMD_LOG_COLUMNS)
    ckpt_io.save_checkpoint(
        out / "generator.ckpt",
        ckpt_io.from_generator(
            state.generator, cfg.schedule, state.iteration, rc.seed,
            **{
                "lambda": repr(rc.lam),
                "target": str(analytic_target or target),
                "target_kind": "analytic" if analytic_target is not None else "checkpoint",
            },
        ),
    )

    pairs, held_y, metrics = held_out_eval(cfg, state.generator, target_dist, rc.seed)
    reports.write_pairs_csv(out / "pairs.csv", pairs)
    reports.write_samples_csv(out / "target_samples.csv", held_y)
    if pairs.dim == 2:
        reports.plot_pairs(pairs, out / "pairs.svg", reference=held_y, title=f"lambda={rc.lam:g}")

    summary = {"lambda": rc.lam, "sigma_init": rc.sigma_init, "iterations": state.iteration, "seed": rc.seed}
    summary.update(metrics)
    ot_err = _ot_error(source, target_dist, pairs)
    if ot_err is not None:
        summary["ot_relative_error"] = ot_err
    reports.write_json(out / "summary.json", summary)
    return summary


def _surface_summary(grid: pd.DataFrame, lam: float) -> dict:
    best = grid.loc[grid["total"].idxmin()]
    cutoff = grid["total"].quantile(0.1)
    bottom = grid[grid["total"] <= cutoff]
    return {
        "lambda": lam,
        "r_argmin": float(best["r"]),
        "alpha_argmin": float(best["alpha"]),
        "total_min": float(best["total"]),
        "n_argmin": int((grid["total"] == best["total"]).sum()),
        "bottom_decile_alpha_span": float(bottom["alpha"].max() - bottom["alpha"].min()),
        "bottom_decile_r_lo": float(bottom["r"].min()),
        "bottom_decile_r_hi": float(bottom["r"].max()),
    }


def run_surface(cfg: ExperimentConfig, out_dir: str | Path, lambdas: tuple[float, ...] | None = None) -> pd.DataFrame:
    out = _prepare(cfg, out_dir)
    sc = cfg.surface
    r_values = np.linspace(sc.r_min, sc.r_max, sc.grid_n)
    alpha_values = np.linspace(sc.alpha_min, sc.alpha_max, sc.grid_n)
    rows = []
    for lam in lambdas or sc.lambdas:
        if lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {lam}")
        grid = surface_grid(
            r_values, alpha_values, lam, cfg.schedule,
            target_std=sc.target_std, omega=sc.omega, steps=sc.quadrature_steps,
        )
        tag = _lam_tag(lam)
        reports.write_csv(out / f"surface_lam{tag}.csv", grid[SURFACE_COLUMNS])
        reports.plot_surface(grid, lam, out / f"surface_lam{tag}.svg")
        rows.append(_surface_summary(grid, lam))
        log.info("surface lambda=%g argmin r=%.4f alpha=%.4f", lam, rows[-1]["r_argmin"], rows[-1]["alpha_argmin"])
    summary = pd.DataFrame(rows)
    reports.write_csv(out / "surface_summary.csv", summary)
    return summary


def _upsert_row(path: Path, record: dict) -> pd.DataFrame:
    if path.exists():
        df = pd.read_csv(path)
        df = df[df["run"] != record["run"]]
        df = pd.concat([df, pd.DataFrame([record])], ignore_index=True)
    else:
        df = pd.DataFrame([record])
    df = df.reindex(columns=SWEEP_COLUMNS).sort_values(["sigma_init", "lambda", "run"], kind="mergesort")
    reports.write_csv(path, df)
    return df


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path, seed: int) -> dict:
    ckpt = ckpt_io.load_checkpoint(checkpoint, cfg.schedule)
    _, _, metrics = held_out_eval(cfg, ckpt.to_generator(), reference_distribution(cfg, ckpt.meta), seed)
    record = {
        "run": Path(checkpoint).parent.name,
        "lambda": float(ckpt.meta.get("lambda", "nan")),
        "sigma_init": ckpt.sigma_init if ckpt.sigma_init is not None else float("nan"),
        "seed": seed,
    }
    record.update(metrics)
    return record


def run_eval(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    checkpoint: str | Path,
    seed: int,
    sweep_csv: str | Path | None = None,
) -> dict:
    out = _prepare(cfg, out_dir)
    record = evaluate_checkpoint(cfg, checkpoint, seed)
    reports.write_json(out / "eval.json", record)
    _upsert_row(Path(sweep_csv) if sweep_csv else out / "sweep.csv", record)
    return record


def run_plot(pairs_csv: str | Path, out_svg: str | Path, reference_csv: str | Path | None = None, title: str | None = None) -> Path:
    pairs = reports.read_pairs_csv(pairs_csv)
    reference = reports.read_samples_csv(reference_csv) if reference_csv else None
    if pairs.dim != 2 and len(pairs):
        raise ValidationError(f"plot: pairs must be planar, got dimension {pairs.dim}")
    return reports.plot_pairs(pairs, out_svg, reference=reference, title=title)


def _sweep_job(args: tuple) -> dict:
    cfg, run_dir, target, analytic_target, init_checkpoint, record_wallclock = args
    run_train_rdmd(cfg, run_dir, target, analytic_target, init_checkpoint, record_wallclock)
    return evaluate_checkpoint(cfg, Path(run_dir) / "generator.ckpt", cfg.seed)


def run_sweep(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    target: str | Path | None = None,
    analytic_target: str | None = None,
    lambdas: tuple[float, ...] | None = None,
    sigma_inits: tuple[float, ...] | None = None,
    workers: int = 1,
    record_wallclock: bool = False,
) -> pd.DataFrame:
    """Train one generator per (sigma_init, lambda) with shared seeds, then evaluate them all."""
    out = _prepare(cfg, out_dir)
    lambdas = tuple(lambdas or cfg.sweep.lambdas)
    sigma_inits = tuple(sigma_inits or cfg.sweep.sigma_inits)
    if len(set(lambdas)) != len(lambdas) or len(set(sigma_inits)) != len(sigma_inits):
        raise ConfigError("sweep: lambda and sigma_init values must be distinct (one output dir per run)")

    init_checkpoint = None
    if analytic_target is not None and cfg.rdmd.generator == "mlp":
        dist = parse_distribution_spec(analytic_target, cfg.data.dim)
        pre = pretrain_denoiser(cfg, dist, Rng(cfg.rdmd.seed).split("pretrain"), record_wallclock)
        init_checkpoint = ckpt_io.save_checkpoint(
            out / "pretrained.ckpt", ckpt_io.from_denoiser(pre.net, cfg.dsm.iterations, cfg.dsm.seed)
        )

    jobs = []
    for sigma_init in sigma_inits:
        for lam in lambdas:
            run_cfg = cfg.replace(rdmd=dataclasses.replace(cfg.rdmd, lam=lam, sigma_init=sigma_init))
            run_dir = out / f"sigma{_lam_tag(sigma_init)}_lam{_lam_tag(lam)}"
            jobs.append((run_cfg, run_dir, target, analytic_target, init_checkpoint, record_wallclock))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_sweep_job, jobs))
    else:
        records = [_sweep_job(job) for job in jobs]

    df = pd.DataFrame(records).reindex(columns=SWEEP_COLUMNS).sort_values(["sigma_init", "lambda"], kind="mergesort")
    reports.write_csv(out / "sweep.csv", df)
    reports.plot_tradeoff(df, out / "tradeoff.svg")
    return df
