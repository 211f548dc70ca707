"""
Regularized distribution matching distillation.

Each iteration runs ``fake_steps`` DSM updates of the fake denoiser on current
generator outputs, then one generator step on the surrogate

    < stopgrad[omega * (s_fake(y) - s_target(y))], G(x) > + lam * ||x - G(x)||^2

with y = G(x) + sigma * eps. Neither score network is differentiated; the
score difference only scales the gradient flowing into G(x).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from rdmd_lab import tensor as T
from rdmd_lab.data import PairSet, Rng, Sampler
from rdmd_lab.diffusion import WEIGHTINGS, dsm_loss, sample_sigmas
from rdmd_lab.errors import DivergenceError, TrainingError, ValidationError
from rdmd_lab.metrics import energy_distance, transport_cost_rms, transport_cost_sq
from rdmd_lab.networks import Denoiser, DenoiserNet, GeneratorNet, LinearGenerator, init_generator_from, score_from_denoiser
from rdmd_lab.optim import Adam
from rdmd_lab.oracles import GaussianDist, OracleDenoiser, linear_pushforward
from rdmd_lab.schedule import NoiseSchedule
from rdmd_lab.tensor import Graph, Tensor

log = logging.getLogger(__name__)

OMEGA_MODES = ("dmd-normalized", "sigma2")
GENERATOR_KINDS = ("mlp", "linear")
# floor for the per-sample L1 normalizer of dmd-normalized weighting
OMEGA_CLAMP = 1e-8


@dataclass(frozen=True)
class RdmdConfig:
    lam: float = 0.2
    sigma_init: float = 1.0
    generator: str = "mlp"
    generator_lr: float = 2e-5
    fake_lr: float = 1e-4
    fake_steps: int = 1
    fake_weighting: str = "inverse-sigma2"
    batch_size: int = 1024
    iterations: int = 5000
    sigma_sampling: str = "log-uniform"
    sigma_lo: float = 0.1
    sigma_hi: float = 40.0
    omega: str = "dmd-normalized"
    eval_every: int = 200
    eval_size: int = 1000
    divergence_factor: float = 10.0
    divergence_patience: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValidationError(f"rdmd.lam must be >= 0, got {self.lam}")
        if self.generator_lr <= 0 or self.fake_lr <= 0:
            raise ValidationError("rdmd: learning rates must be > 0")
        if self.fake_steps < 1 or self.batch_size < 1 or self.iterations < 1 or self.eval_every < 1:
            raise ValidationError("rdmd: fake_steps, batch_size, iterations and eval_every must be >= 1")
        if self.omega not in OMEGA_MODES:
            raise ValidationError(f"rdmd.omega must be one of {OMEGA_MODES}, got {self.omega!r}")
        if self.generator not in GENERATOR_KINDS:
            raise ValidationError(f"rdmd.generator must be one of {GENERATOR_KINDS}, got {self.generator!r}")
        if self.fake_weighting not in WEIGHTINGS:
            raise ValidationError(f"rdmd.fake_weighting must be one of {WEIGHTINGS}, got {self.fake_weighting!r}")
        if not (0 < self.sigma_lo <= self.sigma_hi):
            raise ValidationError(f"rdmd: need 0 < sigma_lo <= sigma_hi, got [{self.sigma_lo}, {self.sigma_hi}]")


class PushforwardFake:
    """Exact fake denoiser for a linear generator fed with a Gaussian source.

    Reads the generator's current matrix on every call, so it never lags.
    """

    def __init__(self, generator: LinearGenerator, source: GaussianDist) -> None:
        self.generator = generator
        self.source = source

    def denoise(self, y: np.ndarray, sigma) -> np.ndarray:
        law = linear_pushforward(self.generator.matrix, self.source)
        return OracleDenoiser(law).denoise(y, sigma)


Generator = GeneratorNet | LinearGenerator
Fake = DenoiserNet | PushforwardFake


@dataclass
class TrainState:
    generator: Generator
    fake: Fake
    target: Denoiser
    gen_opt: Adam
    fake_opt: Adam | None
    config: RdmdConfig
    schedule: NoiseSchedule
    iteration: int = 0
    log: list[dict] = field(default_factory=list)


def init_state(
    config: RdmdConfig,
    target: Denoiser,
    schedule: NoiseSchedule,
    init_denoiser: DenoiserNet | None = None,
    source: GaussianDist | None = None,
) -> TrainState:
    """Fake starts as a copy of the target network, generator as D(., sigma_init)."""
    if config.generator == "linear":
        if source is None:
            raise ValidationError("linear generator needs a Gaussian source law for its analytic fake")
        generator = LinearGenerator.identity(source.dim)
        fake: Fake = PushforwardFake(generator, source)
        fake_opt = None
    else:
        base = init_denoiser if init_denoiser is not None else target
        if not isinstance(base, DenoiserNet):
            raise ValidationError("mlp generator needs a denoiser network to start from")
        generator = init_generator_from(base, config.sigma_init)
        fake = base.copy()
        fake_opt = Adam(config.fake_lr)
    return TrainState(
        generator=generator,
        fake=fake,
        target=target,
        gen_opt=Adam(config.generator_lr),
        fake_opt=fake_opt,
        config=config,
        schedule=schedule,
    )


def omega_weight(mode: str, sigma, d_target: np.ndarray, g_out: np.ndarray, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Per-sample weight of the score difference."""
    s = np.asarray(sigma, dtype=np.float64)
    if schedule is not None:
        schedule.check(s)
    n, d = g_out.shape
    s = np.broadcast_to(s, (n,))
    if mode == "sigma2":
        return s * s
    if mode == "dmd-normalized":
        l1 = np.maximum(np.sum(np.abs(d_target - g_out), axis=1), OMEGA_CLAMP)
        return s * s * d / l1
    raise ValidationError(f"unknown omega mode {mode!r}; expected one of {OMEGA_MODES}")


def generator_gradient(
    state: TrainState,
    x: np.ndarray,
    sigmas: np.ndarray,
    eps: np.ndarray,
) -> dict[str, np.ndarray]:
    cfg = state.config
    n = x.shape[0]
    graph = Graph()
    g_x = state.generator.apply(Tensor(x), graph)
    y = g_x.values + sigmas[:, None] * eps
    d_fake = state.fake.denoise(y, sigmas)
    d_target = state.target.denoise(y, sigmas)
    diff = score_from_denoiser(y, d_fake, sigmas) - score_from_denoiser(y, d_target, sigmas)
    bad = np.flatnonzero(~np.all(np.isfinite(diff), axis=1))
    if bad.size:
        graph.clear()
        i = int(bad[0])
        raise TrainingError(f"score difference is not finite at batch index {i} (sigma={sigmas[i]:.6g})")

    coeff = omega_weight(cfg.omega, sigmas, d_target, g_x.values, state.schedule)[:, None] * diff / n
    loss = T.sum(T.multiply(Tensor(coeff), g_x))
    if cfg.lam > 0:
        loss = T.add(loss, T.scale(T.sum_of_squares(T.subtract(g_x, Tensor(x))), cfg.lam / n))
    return T.backward(graph, loss)


def fake_update(state: TrainState, x: np.ndarray, sigmas: np.ndarray, eps: np.ndarray) -> float:
    """One DSM step of the fake denoiser towards current generator outputs; returns the loss."""
    y0 = state.generator(x)
    if state.fake_opt is None:
        # analytic fake is exact already; report its DSM loss for the log
        law_denoiser = state.fake
        y_t = y0 + sigmas[:, None] * eps
        err = law_denoiser.denoise(y_t, sigmas) - y0
        w = 1.0 / (sigmas * sigmas) if state.config.fake_weighting == "inverse-sigma2" else np.ones_like(sigmas)
        return float(np.mean(w * np.sum(err * err, axis=1)))
    graph = Graph()
    loss = dsm_loss(state.fake, y0, sigmas, eps, state.config.fake_weighting, graph)
    value = loss.item()
    if not math.isfinite(value):
        graph.clear()
        raise TrainingError(f"fake DSM loss is not finite (sigma range {sigmas.min():.6g}..{sigmas.max():.6g})")
    state.fake_opt.step(state.fake.params, T.backward(graph, loss))
    return value


class _DivergenceMonitor:
    def __init__(self, factor: float, patience: int, decay: float = 0.99) -> None:
        self.factor = factor
        self.patience = patience
        self.decay = decay
        self.initial: float | None = None
        self.smoothed: float | None = None
        self.streak = 0

    def update(self, loss: float, iteration: int) -> None:
        if self.initial is None:
            self.initial = self.smoothed = loss
            return
        self.smoothed = self.decay * self.smoothed + (1.0 - self.decay) * loss
        self.streak = self.streak + 1 if self.smoothed > self.factor * self.initial else 0
        if self.streak >= self.patience:
            raise DivergenceError(
                f"fake loss diverged at iteration {iteration}: smoothed {self.smoothed:.6g} "
                f"> {self.factor}x initial {self.initial:.6g} for {self.streak} iterations"
            )


def _eval_row(state: TrainState, eval_source: np.ndarray, eval_target: np.ndarray) -> dict:
    pairs = PairSet(eval_source, state.generator(eval_source))
    return {
        "transport_cost_rms": transport_cost_rms(pairs),
        "transport_cost_sq": transport_cost_sq(pairs),
        "energy_distance": energy_distance(pairs.outputs, eval_target),
    }


def train_rdmd(
    config: RdmdConfig,
    source_sampler: Sampler,
    target: Denoiser,
    schedule: NoiseSchedule,
    eval_source: np.ndarray,
    eval_target: np.ndarray,
    init_denoiser: DenoiserNet | None = None,
    source: GaussianDist | None = None,
    rng: Rng | None = None,
    record_wallclock: bool = False,
) -> TrainState:
    rng = rng or Rng(config.seed)
    state = init_state(config, target, schedule, init_denoiser, source)
    streams = {name: rng.split(name) for name in ("fake-x", "fake-sigma", "fake-eps", "gen-x", "gen-sigma", "gen-eps")}
    monitor = _DivergenceMonitor(config.divergence_factor, config.divergence_patience)
    bs = config.batch_size
    fake_losses: list[float] = []
    t0 = time.perf_counter()

    def draw(prefix: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = source_sampler(bs, streams[f"{prefix}-x"])
        sig = sample_sigmas(bs, streams[f"{prefix}-sigma"], schedule, config.sigma_sampling, config.sigma_lo, config.sigma_hi)
        return x, sig, streams[f"{prefix}-eps"].normal(x.shape)

    for it in range(1, config.iterations + 1):
        step_losses = [fake_update(state, *draw("fake")) for _ in range(config.fake_steps)]
        fake_losses.extend(step_losses)
        monitor.update(float(np.mean(step_losses)), it)

        grads = generator_gradient(state, *draw("gen"))
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingError(f"generator gradient is not finite at iteration {it}")
        state.gen_opt.step(state.generator.params, grads)
        state.iteration = it

        if it % config.eval_every == 0 or it == config.iterations:
            row = {"iteration": it, "fake_loss": float(np.mean(fake_losses))}
            row.update(_eval_row(state, eval_source, eval_target))
            row["wallclock_ms"] = int((time.perf_counter() - t0) * 1000) if record_wallclock else 0
            state.log.append(row)
            fake_losses.clear()
            log.info(
                "rdmd iter=%d lam=%g fake_loss=%.6f cost_rms=%.4f energy=%.4f",
                it, config.lam, row["fake_loss"], row["transport_cost_rms"], row["energy_distance"],
            )
    return state
