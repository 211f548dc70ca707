import math

import numpy as np
import pytest

from rdmd_lab.data import Rng
from rdmd_lab.errors import ValidationError
from rdmd_lab.oracles import (
    GaussianDist,
    GaussianMixture,
    OracleDenoiser,
    RotScaleGenerator,
    apply_linear_map,
    eight_gaussians,
    kl_ensemble,
    kl_gaussian,
    linear_pushforward,
    ot_map_gaussian,
    perturbed_score,
    pushforward_law,
    rdmd_surface,
    rotation,
    surface_grid,
    surface_terms,
    transport_cost,
)


def _random_spd(gen, d):
    a = gen.normal(size=(d, d))
    return a @ a.T + 0.5 * np.eye(d)


def test_gaussian_rejects_bad_covariance():
    with pytest.raises(ValidationError, match="symmetric"):
        GaussianDist(np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValidationError, match="positive definite"):
        GaussianDist(np.zeros(2), [[1.0, 0.0], [0.0, -1.0]])


def test_mixture_weights_must_normalize():
    comp = GaussianDist.isotropic(2)
    with pytest.raises(ValidationError):
        GaussianMixture([0.5, 0.6], (comp, comp))
    with pytest.raises(ValidationError):
        GaussianMixture([1.0, 0.0], (comp, comp))


def test_standard_normal_score_examples():
    dist = GaussianDist.isotropic(2)
    np.testing.assert_allclose(perturbed_score(dist, 0.0, [1.0, 0.0]), [-1.0, 0.0])
    x = Rng(0).normal((10, 2))
    for t in (0.1, 1.0, 7.0):
        np.testing.assert_allclose(perturbed_score(dist, t, x), -x / (1 + t * t), rtol=1e-12)


def test_symmetric_mixture_score_vanishes_at_origin():
    mix = GaussianMixture([0.5, 0.5], (GaussianDist.isotropic(2, mean=[3.0, 0.0]), GaussianDist.isotropic(2, mean=[-3.0, 0.0])))
    np.testing.assert_allclose(perturbed_score(mix, 0.5, [0.0, 0.0]), [0.0, 0.0], atol=1e-15)


def _fd_log_prob(dist, x, sigma, h=1e-5):
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        step = np.zeros(x.shape[1])
        step[j] = h
        out[:, j] = (dist.log_prob(x + step, sigma) - dist.log_prob(x - step, sigma)) / (2 * h)
    return out


@pytest.mark.parametrize(
    "dist",
    [
        GaussianDist([0.5, -1.0], [[2.0, 0.3], [0.3, 0.7]]),
        eight_gaussians(),
    ],
    ids=["gaussian", "8gaussians"],
)
def test_score_matches_log_density_finite_differences(dist):
    rng = Rng(1)
    n = 1000
    sigmas = np.exp(rng.uniform(n, math.log(0.1), math.log(20.0)))
    x = dist.sample(n, rng) + sigmas[:, None] * rng.normal((n, 2))
    exact = dist.score(x, sigmas)
    numeric = _fd_log_prob(dist, x, sigmas)
    assert np.linalg.norm(exact - numeric) / np.linalg.norm(exact) <= 1e-8


def test_oracle_denoiser_is_posterior_mean():
    dist = GaussianDist.isotropic(2, 1.0)
    x = Rng(2).normal((5, 2)) * 3
    np.testing.assert_allclose(OracleDenoiser(dist).denoise(x, 2.0), x / 5.0, rtol=1e-12)


def test_kl_examples():
    p = GaussianDist.isotropic(2, 1.0)
    assert kl_gaussian(p, p) == 0.0
    q = GaussianDist.isotropic(2, 1.5)
    assert kl_gaussian(p, q) == pytest.approx(0.25542, abs=1e-4)
    assert kl_gaussian(p, q) == pytest.approx(1 / 2.25 - 1 + math.log(2.25), rel=1e-12)


def test_kl_monte_carlo_cross_check():
    p, q = GaussianDist.isotropic(2, 1.0), GaussianDist.isotropic(2, 1.5)
    x = p.sample(1_000_000, Rng(3))
    mc = float(np.mean(p.log_prob(x) - q.log_prob(x)))
    assert mc == pytest.approx(kl_gaussian(p, q), abs=5e-3)


def test_kl_nonnegative_on_random_pairs():
    gen = np.random.default_rng(4)
    for _ in range(1000):
        p = GaussianDist(gen.normal(size=2), _random_spd(gen, 2))
        q = GaussianDist(gen.normal(size=2), _random_spd(gen, 2))
        assert kl_gaussian(p, q) >= -1e-12


def test_pushforward_law_examples():
    law = pushforward_law(RotScaleGenerator(1.5, 0.7))
    np.testing.assert_allclose(law.cov, 2.25 * np.eye(2))
    for alpha in (-2.0, 0.0, 1.3):
        np.testing.assert_allclose(pushforward_law(RotScaleGenerator(1.0, alpha)).cov, np.eye(2))
        np.testing.assert_allclose(
            linear_pushforward(RotScaleGenerator(1.2, alpha).matrix, GaussianDist.isotropic(2)).cov,
            1.44 * np.eye(2),
            atol=1e-14,
        )
    np.testing.assert_allclose(pushforward_law(RotScaleGenerator(1.5, 0.0), 2.0).cov, 6.25 * np.eye(2))
    with pytest.raises(ValidationError):
        RotScaleGenerator(0.0, 0.0)


def test_rotscale_determinant():
    gen = RotScaleGenerator(1.7, 0.4)
    assert np.linalg.det(gen.matrix) == pytest.approx(1.7 ** 2)


def test_transport_term_example():
    assert transport_cost(1.5, 0.0) == pytest.approx(0.5)
    x = Rng(5).normal((1_000_000, 2))
    mc = float(np.mean(np.sum((x - 1.5 * x) ** 2, axis=1)))
    assert mc == pytest.approx(0.5, rel=0.01)


def test_kl_ensemble_vanishes_at_target_scale(schedule):
    assert kl_ensemble(1.5, schedule) == pytest.approx(0.0, abs=1e-12)
    assert kl_ensemble(1.0, schedule) > 0.0
    with pytest.raises(ValidationError, match="steps"):
        kl_ensemble(1.0, schedule, steps=8)
    with pytest.raises(ValidationError, match="omega"):
        kl_ensemble(1.0, schedule, omega="constant")


def test_surface_terms_add_up(schedule):
    terms = surface_terms(1.2, 0.3, 0.2, schedule)
    assert terms.total == pytest.approx(terms.kl_term + 0.2 * terms.cost_term)
    assert rdmd_surface(1.2, 0.3, 0.2, schedule) == terms.total


def test_unregularized_surface_is_flat_in_alpha(schedule):
    values = [rdmd_surface(1.3, a, 0.0, schedule) for a in np.linspace(-math.pi, math.pi, 17)]
    assert max(values) - min(values) <= 1e-12


def _grid(lam, schedule, n=64):
    r = np.linspace(0.5, 2.5, n)
    alpha = np.linspace(-math.pi, math.pi, n)
    return r, alpha, surface_grid(r, alpha, lam, schedule)


def test_unregularized_minima_span_all_rotations(schedule):
    r, _, df = _grid(0.0, schedule)
    cell = r[1] - r[0]
    minima = df[df["total"] <= df["total"].min() + 1e-12]
    assert np.all(np.abs(minima["r"] - 1.5) <= cell)
    bottom = df[df["total"] <= df["total"].quantile(0.1)]
    assert bottom["alpha"].max() - bottom["alpha"].min() >= 0.9 * 2 * math.pi


def test_regularized_minimum_is_unique_and_below_target_scale(schedule):
    _, alpha, df = _grid(0.2, schedule)
    best = df.loc[df["total"].idxmin()]
    # an even alpha grid straddles 0, so the two cells at +-half a step tie
    ties = df[df["total"] <= best["total"] + 1e-9]
    assert len(ties) <= 2 and ties["r"].nunique() == 1
    assert np.all(np.abs(ties["alpha"]) <= alpha[1] - alpha[0])
    assert best["r"] < 1.5


def test_surface_grid_columns(schedule):
    df = surface_grid(np.array([1.0, 2.0]), np.array([0.0, 1.0]), 0.5, schedule, steps=32)
    assert list(df.columns) == ["r", "alpha", "kl_term", "cost_term", "total"]
    assert len(df) == 4


def test_ot_map_examples():
    src = GaussianDist.isotropic(2, 1.0)
    m, b = ot_map_gaussian(src, GaussianDist.isotropic(2, 1.5))
    np.testing.assert_allclose(m, 1.5 * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)

    m, b = ot_map_gaussian(src, src)
    np.testing.assert_allclose(m, np.eye(2), atol=1e-12)

    m, b = ot_map_gaussian(GaussianDist([0.0], [[1.0]]), GaussianDist([3.0], [[4.0]]))
    np.testing.assert_allclose(m, [[2.0]])
    np.testing.assert_allclose(b, [3.0])


def test_ot_map_matches_sorted_empirical_coupling_in_1d():
    rng = Rng(6)
    x = np.sort(rng.normal(10_000))
    y = np.sort(3.0 + 2.0 * rng.normal(10_000))
    m, b = ot_map_gaussian(GaussianDist([0.0], [[1.0]]), GaussianDist([3.0], [[4.0]]))
    mapped = apply_linear_map(x[:, None], m, b)[:, 0]
    # bulk of the quantile coupling agrees with the closed form
    core = slice(500, 9500)
    assert np.median(np.abs(mapped[core] - y[core])) < 0.05


def test_ot_map_pushes_to_target_covariance():
    gen = np.random.default_rng(7)
    src = GaussianDist(np.array([1.0, -1.0]), _random_spd(gen, 2))
    tgt = GaussianDist(np.array([0.0, 2.0]), _random_spd(gen, 2))
    m, b = ot_map_gaussian(src, tgt)
    y = apply_linear_map(src.sample(100_000, Rng(8)), m, b)
    np.testing.assert_allclose(np.cov(y.T), tgt.cov, rtol=0.03, atol=0.03 * np.abs(tgt.cov).max())
    np.testing.assert_allclose(m, m.T)
    assert np.all(np.linalg.eigvalsh(m) > 0)


def test_rotation_is_orthogonal():
    c = rotation(0.9)
    np.testing.assert_allclose(c @ c.T, np.eye(2), atol=1e-15)
