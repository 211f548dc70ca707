"""
Forward noising, denoising score matching and the probability-flow ODE sampler.

With sigma(t) = t the PF-ODE reads dx/dsigma = -sigma * score = (x - D(x, sigma)) / sigma,
which is what ``heun_integrate`` steps through on a rho-spaced noise grid.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from rdmd_lab import tensor as T
from rdmd_lab.data import Rng, Sampler
from rdmd_lab.errors import SamplingError, ShapeError, TrainingError, ValidationError
from rdmd_lab.networks import Denoiser, DenoiserNet, NetConfig, score_from_denoiser
from rdmd_lab.optim import Adam
from rdmd_lab.oracles import AnalyticDistribution
from rdmd_lab.schedule import NoiseSchedule
from rdmd_lab.tensor import Graph, Tensor

log = logging.getLogger(__name__)

SIGMA_LAWS = ("log-uniform", "log-normal")
WEIGHTINGS = ("inverse-sigma2", "uniform")


@dataclass(frozen=True)
class DsmConfig:
    sigma_sampling: str = "log-uniform"
    p_mean: float = -1.2
    p_std: float = 1.2
    weighting: str = "inverse-sigma2"
    batch_size: int = 1024
    iterations: int = 20000
    lr: float = 1e-4
    log_every: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_sampling not in SIGMA_LAWS:
            raise ValidationError(f"dsm.sigma_sampling must be one of {SIGMA_LAWS}, got {self.sigma_sampling!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValidationError(f"dsm.weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.batch_size < 1 or self.iterations < 1 or self.log_every < 1:
            raise ValidationError("dsm: batch_size, iterations and log_every must be >= 1")
        if self.lr <= 0 or self.p_std <= 0:
            raise ValidationError("dsm: lr and p_std must be > 0")


def sample_sigmas(
    n: int,
    rng: Rng,
    schedule: NoiseSchedule,
    law: str = "log-uniform",
    lo: float | None = None,
    hi: float | None = None,
    p_mean: float = -1.2,
    p_std: float = 1.2,
) -> np.ndarray:
    """Per-row noise levels, always inside [sigma_min, T]."""
    lo = schedule.sigma_min if lo is None else lo
    hi = schedule.T if hi is None else hi
    if law == "log-uniform":
        if not (0 < lo <= hi):
            raise ValidationError(f"sigma range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")
        s = np.exp(rng.uniform(n, math.log(lo), math.log(hi)))
    elif law == "log-normal":
        s = np.exp(rng.normal(n) * p_std + p_mean)
    else:
        raise ValidationError(f"unknown sigma law {law!r}; expected one of {SIGMA_LAWS}")
    return schedule.clip(s)


def perturb(x0: np.ndarray, sigma, eps: np.ndarray) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"perturb: x0 {x0.shape} and eps {eps.shape} differ")
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    return x0 + s * eps


def row_weights(sigmas: np.ndarray, weighting: str) -> np.ndarray:
    if weighting == "inverse-sigma2":
        return 1.0 / (sigmas * sigmas)
    if weighting == "uniform":
        return np.ones_like(sigmas)
    raise ValidationError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


def dsm_loss(
    net: DenoiserNet,
    batch: np.ndarray,
    sigmas: np.ndarray,
    eps: np.ndarray,
    weighting: str = "inverse-sigma2",
    graph: Graph | None = None,
) -> Tensor:
    """Weighted mean over rows of ||D(x0 + sigma * eps, sigma) - x0||^2."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValidationError(f"dsm_loss: batch must be a non-empty (n, d) array, got shape {batch.shape}")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    n = batch.shape[0]
    if sigmas.shape != (n,):
        raise ShapeError(f"dsm_loss: need one sigma per row, got {sigmas.shape} for {n} rows")
    x_t = perturb(batch, sigmas, eps)
    diff = T.subtract(net.apply(Tensor(x_t), sigmas, graph), Tensor(batch))
    if weighting == "uniform":
        return T.scale(T.sum_of_squares(diff), 1.0 / n)
    w = np.repeat(row_weights(sigmas, weighting)[:, None], batch.shape[1], axis=1)
    return T.scale(T.sum(T.multiply(T.multiply(diff, diff), Tensor(w))), 1.0 / n)


@dataclass
class DsmResult:
    net: DenoiserNet
    log: list[dict] = field(default_factory=list)


def _nonfinite_diagnostic(net: DenoiserNet, batch, sigmas, eps, iteration: int) -> TrainingError:
    with np.errstate(all="ignore"):
        x_t = perturb(batch, sigmas, eps)
        out = net.apply(Tensor(x_t), sigmas).values if np.all(np.isfinite(x_t)) else x_t
    bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
    row = int(bad[0]) if bad.size else int(np.argmax(sigmas))
    return TrainingError(f"DSM loss is not finite at iteration {iteration} (row {row}, sigma={sigmas[row]:.6g})")


def train_dsm(
    config: DsmConfig,
    sampler: Sampler,
    schedule: NoiseSchedule,
    net_config: NetConfig | None = None,
    net: DenoiserNet | None = None,
    rng: Rng | None = None,
    record_wallclock: bool = False,
) -> DsmResult:
    rng = rng or Rng(config.seed)
    if net is None:
        net = DenoiserNet.init(net_config or NetConfig(), schedule, rng.split("init"))
    data_rng, sigma_rng, noise_rng = rng.split("data"), rng.split("sigma"), rng.split("noise")
    opt = Adam(config.lr)
    result = DsmResult(net=net)
    window: list[float] = []
    t0 = time.perf_counter()

    for it in range(1, config.iterations + 1):
        batch = sampler(config.batch_size, data_rng)
        sigmas = sample_sigmas(
            config.batch_size, sigma_rng, schedule, config.sigma_sampling, p_mean=config.p_mean, p_std=config.p_std
        )
        eps = noise_rng.normal(batch.shape)
        graph = Graph()
        loss = dsm_loss(net, batch, sigmas, eps, config.weighting, graph)
        value = loss.item()
        if not math.isfinite(value):
            graph.clear()
            raise _nonfinite_diagnostic(net, batch, sigmas, eps, it)
        grads = T.backward(graph, loss)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"DSM gradient is not finite at iteration {it} (loss={value:.6g})")
        opt.step(net.params, grads)
        window.append(value)

        if it % config.log_every == 0 or it == config.iterations:
            wall = int((time.perf_counter() - t0) * 1000) if record_wallclock else 0
            result.log.append({"iteration": it, "loss": float(np.mean(window)), "wallclock_ms": wall})
            log.info("dsm iter=%d loss=%.6f", it, result.log[-1]["loss"])
            window.clear()
    return result


def heun_integrate(denoiser: Denoiser, x_init: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    """Second-order Heun steps of dx/dsigma = (x - D(x, sigma)) / sigma along ``sigmas``."""
    x = np.asarray(x_init, dtype=np.float64)
    for i, (s_cur, s_next) in enumerate(zip(sigmas[:-1], sigmas[1:])):
        h = s_next - s_cur
        d_cur = (x - denoiser.denoise(x, s_cur)) / s_cur
        x_euler = x + h * d_cur
        d_next = (x_euler - denoiser.denoise(x_euler, s_next)) / s_next
        x = x + h * 0.5 * (d_cur + d_next)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"PF-ODE state is not finite after step {i} (sigma {s_cur:.6g} -> {s_next:.6g})")
    return x


def pf_ode_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    n: int,
    steps: int,
    seed: int | Rng = 0,
    dim: int = 2,
    rho: float = 7.0,
) -> np.ndarray:
    if steps < 2:
        raise ValidationError(f"pf_ode_sample: steps must be >= 2, got {steps}")
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    x_init = schedule.T * rng.normal((n, dim))
    return heun_integrate(denoiser, x_init, schedule.karras_grid(steps, rho))


def score_error(
    denoiser: Denoiser,
    dist: AnalyticDistribution,
    sigmas,
    rng: Rng,
    n: int = 2000,
) -> dict[float, float]:
    """Relative L2 error of the denoiser's score against the exact one.

    Evaluation points are drawn from the target perturbed at each sigma, i.e.
    where the score is actually used.
    """
    out = {}
    for sigma in sigmas:
        sub = rng.split(f"sigma={sigma!r}")
        x = dist.sample(n, sub) + sigma * sub.normal((n, dist.dim))
        learned = score_from_denoiser(x, denoiser.denoise(x, sigma), sigma)
        exact = dist.score(x, sigma)
        out[float(sigma)] = float(np.linalg.norm(learned - exact) / np.linalg.norm(exact))
    return out
