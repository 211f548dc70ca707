import math

import numpy as np
import pytest

from rdmd_lab import trainer as trainer_mod
from rdmd_lab.data import FreshSampler, PairSet, Rng
from rdmd_lab.diffusion import sample_sigmas
from rdmd_lab.errors import DivergenceError, TrainingError, ValidationError
from rdmd_lab.metrics import energy_distance, transport_cost_rms
from rdmd_lab.networks import score_from_denoiser
from rdmd_lab.oracles import (
    GaussianDist,
    OracleDenoiser,
    kl_gaussian,
    linear_pushforward,
    rdmd_surface_grad,
    rotation,
)
from rdmd_lab.trainer import (
    PushforwardFake,
    RdmdConfig,
    _DivergenceMonitor,
    fake_update,
    generator_gradient,
    init_state,
    omega_weight,
    train_rdmd,
)

SOURCE = GaussianDist.isotropic(2, 1.0)


def _draw(n, seed, schedule, lo=0.1, hi=40.0):
    rng = Rng(seed)
    x = rng.normal((n, 2))
    sigmas = sample_sigmas(n, rng.split("sigma"), schedule, "log-uniform", lo, hi)
    return x, sigmas, rng.split("eps").normal((n, 2))


def _linear_state(schedule, target_std=1.5, **overrides):
    cfg = RdmdConfig(generator="linear", omega="sigma2", **overrides)
    return init_state(cfg, OracleDenoiser(GaussianDist.isotropic(2, target_std)), schedule, source=SOURCE)


def test_config_validation():
    with pytest.raises(ValidationError, match="lam"):
        RdmdConfig(lam=-0.1)
    with pytest.raises(ValidationError):
        RdmdConfig(generator_lr=0.0)
    with pytest.raises(ValidationError, match="omega"):
        RdmdConfig(omega="sigma")
    with pytest.raises(ValidationError):
        RdmdConfig(sigma_lo=5.0, sigma_hi=1.0)


def test_omega_examples():
    g_out = np.zeros((1, 2))
    assert omega_weight("sigma2", 2.0, np.ones((1, 2)), g_out)[0] == 4.0
    # L1 norm of the difference equals the dimension, so the normalizer cancels
    assert omega_weight("dmd-normalized", 2.0, np.array([[1.0, -1.0]]), g_out)[0] == pytest.approx(4.0)
    with pytest.raises(ValidationError):
        omega_weight("flat", 1.0, g_out, g_out)


def test_omega_positive_and_clamped(schedule):
    rng = Rng(1)
    n = 100_000
    sigmas = sample_sigmas(n, rng, schedule)
    g_out = rng.normal((n, 2))
    d_target = g_out + 1e-3 * rng.normal((n, 2))
    d_target[:10] = g_out[:10]
    for mode in ("sigma2", "dmd-normalized"):
        w = omega_weight(mode, sigmas, d_target, g_out, schedule)
        assert np.all(w > 0) and np.all(np.isfinite(w))


def test_omega_checks_sigma_range(schedule):
    with pytest.raises(ValidationError, match="outside schedule range"):
        omega_weight("sigma2", np.array([100.0]), np.zeros((1, 2)), np.zeros((1, 2)), schedule)


def test_init_state_contracts(schedule, tiny_net):
    state = init_state(RdmdConfig(), tiny_net, schedule)
    x = Rng(0).normal((16, 2))
    assert np.array_equal(state.generator(x), tiny_net.denoise(x, 1.0))
    for name, p in tiny_net.params.items():
        assert state.fake.params[name].tobytes() == p.tobytes()
        assert state.fake.params[name] is not p

    with pytest.raises(ValidationError, match="source"):
        init_state(RdmdConfig(generator="linear"), tiny_net, schedule)
    with pytest.raises(ValidationError, match="denoiser network"):
        init_state(RdmdConfig(), OracleDenoiser(SOURCE), schedule)


def test_zero_gradient_fixed_point(schedule, tiny_net):
    state = init_state(RdmdConfig(lam=0.0), tiny_net, schedule)
    state.fake = state.target
    grads = generator_gradient(state, *_draw(64, 2, schedule))
    assert all(not np.any(g) for g in grads.values())

    before = {k: v.copy() for k, v in state.generator.params.items()}
    state.gen_opt.step(state.generator.params, grads)
    for name, p in state.generator.params.items():
        assert p.tobytes() == before[name].tobytes()


def test_identity_generator_on_matching_law_has_zero_gradient(schedule):
    state = _linear_state(schedule, target_std=1.0, lam=0.3)
    grads = generator_gradient(state, *_draw(128, 3, schedule))
    assert not np.any(grads["weight"])


def test_pushforward_fake_follows_generator(schedule):
    state = _linear_state(schedule)
    assert isinstance(state.fake, PushforwardFake)
    y = Rng(4).normal((5, 2))
    state.generator.params["weight"] = 2.0 * np.eye(2)
    np.testing.assert_allclose(state.fake.denoise(y, 1.0), y * 4.0 / 5.0)


def test_generator_gradient_matches_surface(schedule):
    r, alpha, lam = 1.2, 0.3, 0.1
    state = _linear_state(schedule, lam=lam)
    state.generator.params["weight"] = (r * rotation(alpha)).T.copy()
    c, s = math.cos(alpha), math.sin(alpha)
    dc = np.array([[-s, -c], [c, -s]])

    chunks = []
    for k in range(20):
        g_a = generator_gradient(state, *_draw(5000, 100 + k, schedule))["weight"].T
        chunks.append([np.sum(g_a * rotation(alpha)), np.sum(g_a * r * dc)])
    chunks = np.array(chunks)
    estimate = chunks.mean(axis=0)
    se = chunks.std(axis=0, ddof=1) / math.sqrt(len(chunks))

    ref = rdmd_surface_grad(
        r, alpha, lam, schedule, target_std=1.5, omega="sigma2-loguniform", sigma_range=(0.1, 40.0)
    )
    assert np.all(np.abs(estimate - ref) <= 4 * se + 1e-4 * np.abs(ref))


def test_non_finite_score_difference_names_row(schedule, tiny_net):
    class Broken:
        def denoise(self, y, sigma):
            out = np.array(y, dtype=np.float64)
            out[3] = np.nan
            return out

    state = init_state(RdmdConfig(), tiny_net, schedule)
    state.target = Broken()
    x, sigmas, eps = _draw(8, 5, schedule)
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match=r"batch index 3 \(sigma="):
        generator_gradient(state, x, sigmas, eps)


def test_fake_update_leaves_generator_untouched(schedule, tiny_net):
    state = init_state(RdmdConfig(fake_lr=1e-3), tiny_net, schedule)
    gen_before = {k: v.copy() for k, v in state.generator.params.items()}
    fake_before = {k: v.copy() for k, v in state.fake.params.items()}
    loss = fake_update(state, *_draw(32, 6, schedule))
    assert loss >= 0.0
    for name, p in state.generator.params.items():
        assert p.tobytes() == gen_before[name].tobytes()
    assert any(not np.array_equal(state.fake.params[k], fake_before[k]) for k in fake_before)


def test_analytic_fake_loss_is_reported(schedule):
    state = _linear_state(schedule)
    assert fake_update(state, *_draw(64, 7, schedule)) >= 0.0
    assert np.array_equal(state.generator.matrix, np.eye(2))


def test_divergence_monitor():
    monitor = _DivergenceMonitor(factor=10.0, patience=3)
    monitor.update(1.0, 1)
    monitor.update(1000.0, 2)
    monitor.update(1000.0, 3)
    with pytest.raises(DivergenceError, match="iteration 4"):
        monitor.update(1000.0, 4)


def test_divergence_streak_resets():
    monitor = _DivergenceMonitor(factor=10.0, patience=3, decay=0.0)
    monitor.update(1.0, 1)
    for it, value in enumerate([100.0, 100.0, 1.0, 100.0, 100.0], start=2):
        monitor.update(value, it)
    assert monitor.streak == 2


def _run_linear(schedule, **overrides):
    params = dict(batch_size=128, iterations=6, eval_every=3, generator_lr=1e-3)
    params.update(overrides)
    cfg = RdmdConfig(generator="linear", omega="sigma2", **params)
    rng = Rng(cfg.seed)
    eval_source = SOURCE.sample(200, rng.split("eval-source"))
    eval_target = GaussianDist.isotropic(2, 1.5).sample(200, rng.split("eval-target"))
    return train_rdmd(
        cfg, FreshSampler(SOURCE), OracleDenoiser(GaussianDist.isotropic(2, 1.5)), schedule,
        eval_source, eval_target, source=SOURCE,
    )


def test_train_rdmd_logs_and_determinism(schedule):
    a = _run_linear(schedule)
    b = _run_linear(schedule)
    assert a.iteration == 6
    assert [row["iteration"] for row in a.log] == [3, 6]
    assert set(a.log[0]) == {"iteration", "fake_loss", "transport_cost_rms", "transport_cost_sq", "energy_distance", "wallclock_ms"}
    assert a.log == b.log
    assert a.generator.params["weight"].tobytes() == b.generator.params["weight"].tobytes()
    assert not np.array_equal(a.generator.matrix, np.eye(2))


def test_train_rdmd_mlp_keeps_target_frozen(schedule, tiny_net):
    cfg = RdmdConfig(batch_size=32, iterations=3, eval_every=2, fake_steps=2, generator_lr=1e-3)
    target_before = {k: v.copy() for k, v in tiny_net.params.items()}
    rng = Rng(8)
    state = train_rdmd(
        cfg, FreshSampler(SOURCE), tiny_net, schedule, SOURCE.sample(50, rng), SOURCE.sample(50, rng),
    )
    for name, p in tiny_net.params.items():
        assert p.tobytes() == target_before[name].tobytes()
    assert [row["iteration"] for row in state.log] == [2, 3]
    assert all(row["fake_loss"] >= 0 for row in state.log)
    assert any(not np.array_equal(state.generator.params[k], target_before[k]) for k in target_before)


def test_dominant_regularizer_pins_identity(schedule):
    state = _run_linear(schedule, lam=1e6, iterations=200, eval_every=100, generator_lr=2e-5)
    assert state.log[-1]["transport_cost_rms"] < 1e-2


@pytest.mark.slow
def test_linear_generator_approaches_ot_map_as_lambda_vanishes(schedule):
    x_test = Rng(99).normal((1000, 2))
    errors = []
    for lam in (0.5, 0.1, 0.02, 1e-3):
        state = _run_linear(schedule, lam=lam, batch_size=1024, iterations=3000, eval_every=1000, generator_lr=5e-3)
        g = state.generator(x_test)
        errors.append(float(np.mean(np.linalg.norm(g - 1.5 * x_test, axis=1) / np.linalg.norm(1.5 * x_test, axis=1))))
    assert errors == sorted(errors, reverse=True)
    assert errors[-1] <= 0.05


@pytest.mark.slow
def test_fake_regresses_onto_constant_generator(schedule, tiny_net):
    c = np.array([0.7, -1.3])

    class Constant:
        def __call__(self, x):
            return np.tile(c, (x.shape[0], 1))

    state = init_state(RdmdConfig(fake_lr=1e-2, fake_weighting="uniform"), tiny_net, schedule)
    state.generator = Constant()
    rng = Rng(10)
    for _ in range(3000):
        loss = fake_update(state, rng.normal((64, 2)), np.full(64, 1.0), rng.normal((64, 2)))
    assert loss < 1e-3
    y = c + rng.normal((100, 2))
    np.testing.assert_allclose(state.fake.denoise(y, 1.0), np.tile(c, (100, 1)), atol=0.05)


def test_divergence_monitor_sees_one_value_per_iteration(schedule, monkeypatch):
    seen = []

    class Recording(trainer_mod._DivergenceMonitor):
        def update(self, loss, iteration):
            seen.append(iteration)
            super().update(loss, iteration)

    monkeypatch.setattr(trainer_mod, "_DivergenceMonitor", Recording)
    _run_linear(schedule, fake_steps=3)
    assert seen == [1, 2, 3, 4, 5, 6]


def test_mlp_generator_gradient_matches_surrogate_finite_differences(schedule, tiny_net, fd, rel_err):
    lam = 0.3
    state = init_state(RdmdConfig(lam=lam, omega="sigma2"), tiny_net, schedule)
    noise = Rng(21)
    for p in state.fake.params.values():
        p += 0.1 * noise.normal(p.shape)
    x, sigmas, eps = _draw(8, 22, schedule)
    n = x.shape[0]
    grads = generator_gradient(state, x, sigmas, eps)

    # the score difference and its weight are held fixed at the current generator
    g_x = state.generator(x)
    y = g_x + sigmas[:, None] * eps
    d_fake, d_target = state.fake.denoise(y, sigmas), state.target.denoise(y, sigmas)
    diff = score_from_denoiser(y, d_fake, sigmas) - score_from_denoiser(y, d_target, sigmas)
    coeff = omega_weight("sigma2", sigmas, d_target, g_x, schedule)[:, None] * diff / n

    def surrogate() -> float:
        out = state.generator(x)
        return float(np.sum(coeff * out) + lam / n * np.sum((out - x) ** 2))

    analytic, numeric = [], []
    for name in sorted(state.generator.params):
        saved = state.generator.params[name]

        def f(v, name=name):
            state.generator.params[name] = v
            return surrogate()

        numeric.append(fd(f, saved.copy()).ravel())
        state.generator.params[name] = saved
        analytic.append(grads[name].ravel())
    assert rel_err(np.concatenate(analytic), np.concatenate(numeric)) <= 1e-5


def test_transport_quality_tradeoff_is_monotone_in_lambda(schedule):
    target = GaussianDist.isotropic(2, 1.5)
    x_test = Rng(99).normal((2000, 2))
    y_ref = target.sample(2000, Rng(98))
    costs, kls, rms, energies = [], [], [], []
    for lam in (0.0, 0.05, 0.2, 1.0):
        state = _run_linear(schedule, lam=lam, batch_size=256, iterations=1000, eval_every=1000, generator_lr=1e-2)
        a = state.generator.matrix
        costs.append(float(np.sum((a - np.eye(2)) ** 2)))
        kls.append(kl_gaussian(linear_pushforward(a, SOURCE), target))
        out = state.generator(x_test)
        rms.append(transport_cost_rms(PairSet(x_test, out)))
        energies.append(energy_distance(out, y_ref))
    assert costs == sorted(costs, reverse=True)
    assert kls == sorted(kls)
    for lo, hi in zip(range(3), range(1, 4)):
        assert rms[hi] <= 1.05 * rms[lo]
        assert energies[hi] >= energies[lo] / 1.05
