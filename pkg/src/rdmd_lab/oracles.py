"""
Closed-form ground truth for the toy problems.

Perturbing a Gaussian by N(0, sigma^2 I) adds sigma^2 I to its covariance, so
every perturbed score, density and KL below is exact. Per-row noise levels are
supported everywhere by stacking one covariance per row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from scipy.integrate import simpson
from scipy.special import logsumexp, softmax

from rdmd_lab.errors import ShapeError, ValidationError
from rdmd_lab.schedule import NoiseSchedule

if TYPE_CHECKING:
    from rdmd_lab.data import Rng

SYMMETRY_TOL = 1e-10


def _as_rows(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ShapeError(f"expected a point or a (n, d) batch, got shape {arr.shape}")
    return arr, False


def _row_sigmas(sigma, n: int) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(n, float(s))
    if s.shape != (n,):
        raise ShapeError(f"sigma must be a scalar or shape ({n},), got {s.shape}")
    if np.any(s < 0):
        raise ValidationError("sigma must be >= 0")
    return s


@dataclass(frozen=True, eq=False)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"GaussianDist: mean {mean.shape} and cov {cov.shape} do not conform")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > SYMMETRY_TOL * scale:
            raise ValidationError("GaussianDist: covariance is not symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError("GaussianDist: covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def isotropic(cls, dim: int, std: float = 1.0, mean=None) -> "GaussianDist":
        m = np.zeros(dim) if mean is None else mean
        return cls(m, (std ** 2) * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.mean.size

    def perturbed(self, sigma: float) -> "GaussianDist":
        if sigma < 0:
            raise ValidationError("sigma must be >= 0")
        return GaussianDist(self.mean, self.cov + (sigma ** 2) * np.eye(self.dim))

    def _row_covs(self, sigma, n: int) -> np.ndarray:
        s = _row_sigmas(sigma, n)
        return self.cov[None, :, :] + (s ** 2)[:, None, None] * np.eye(self.dim)[None, :, :]

    def log_prob(self, x, sigma=0.0):
        rows, single = _as_rows(x)
        covs = self._row_covs(sigma, rows.shape[0])
        diff = rows - self.mean
        sol = np.linalg.solve(covs, diff[:, :, None])[:, :, 0]
        _, logdet = np.linalg.slogdet(covs)
        out = -0.5 * (self.dim * math.log(2.0 * math.pi) + logdet + np.sum(diff * sol, axis=1))
        return out[0] if single else out

    def score(self, x, sigma=0.0):
        rows, single = _as_rows(x)
        covs = self._row_covs(sigma, rows.shape[0])
        out = -np.linalg.solve(covs, (rows - self.mean)[:, :, None])[:, :, 0]
        return out[0] if single else out

    def sample(self, n: int, rng: "Rng") -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.normal((n, self.dim)) @ chol.T


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray
    components: tuple[GaussianDist, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        comps = tuple(self.components)
        if w.ndim != 1 or w.size != len(comps) or not comps:
            raise ShapeError("GaussianMixture: one weight per component required")
        if np.any(w <= 0):
            raise ValidationError("GaussianMixture: weights must be > 0")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValidationError(f"GaussianMixture: weights sum to {w.sum()!r}, expected 1")
        if len({c.dim for c in comps}) != 1:
            raise ShapeError("GaussianMixture: components have different dimensions")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def _component_log_probs(self, rows: np.ndarray, sigma) -> np.ndarray:
        return np.stack([np.log(w) + c.log_prob(rows, sigma) for w, c in zip(self.weights, self.components)], axis=1)

    def log_prob(self, x, sigma=0.0):
        rows, single = _as_rows(x)
        out = logsumexp(self._component_log_probs(rows, sigma), axis=1)
        return out[0] if single else out

    def score(self, x, sigma=0.0):
        rows, single = _as_rows(x)
        resp = softmax(self._component_log_probs(rows, sigma), axis=1)
        scores = np.stack([c.score(rows, sigma) for c in self.components], axis=1)
        out = np.einsum("nk,nkd->nd", resp, scores)
        return out[0] if single else out

    def sample(self, n: int, rng: "Rng") -> np.ndarray:
        picks = rng.choice(len(self.components), n, p=self.weights)
        z = rng.normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            rows = picks == k
            chol = np.linalg.cholesky(comp.cov)
            out[rows] = comp.mean + z[rows] @ chol.T
        return out


AnalyticDistribution = GaussianDist | GaussianMixture


def eight_gaussians(radius: float = 10.0, std: float = 0.5) -> GaussianMixture:
    angles = np.arange(8) * (np.pi / 4.0)
    comps = tuple(GaussianDist.isotropic(2, std, mean=radius * np.array([np.cos(a), np.sin(a)])) for a in angles)
    return GaussianMixture(np.full(8, 1.0 / 8.0), comps)


def perturbed_score(dist: AnalyticDistribution, sigma, x):
    """Exact grad log of ``dist`` convolved with N(0, sigma^2 I)."""
    return dist.score(x, sigma)


class OracleDenoiser:
    """Posterior-mean denoiser of an analytic law: D(x, s) = x + s^2 * score."""

    def __init__(self, dist: AnalyticDistribution) -> None:
        self.dist = dist

    def denoise(self, x: np.ndarray, sigma) -> np.ndarray:
        rows, _ = _as_rows(x)
        s = _row_sigmas(sigma, rows.shape[0])
        return rows + (s ** 2)[:, None] * self.dist.score(rows, s)


def kl_gaussian(p: GaussianDist, q: GaussianDist) -> float:
    if p.dim != q.dim:
        raise ShapeError(f"kl_gaussian: dimensions {p.dim} and {q.dim} differ")
    sign_q, logdet_q = np.linalg.slogdet(q.cov)
    if sign_q <= 0:
        raise ValidationError("kl_gaussian: q covariance is singular")
    _, logdet_p = np.linalg.slogdet(p.cov)
    dmu = q.mean - p.mean
    trace = float(np.trace(np.linalg.solve(q.cov, p.cov)))
    mahal = float(dmu @ np.linalg.solve(q.cov, dmu))
    return 0.5 * (trace - p.dim + mahal + logdet_q - logdet_p)


def rotation(alpha: float) -> np.ndarray:
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RotScaleGenerator:
    """Linear map A = r * C(alpha) in the plane."""

    r: float
    alpha: float

    def __post_init__(self) -> None:
        if self.r <= 0:
            raise ValidationError(f"RotScaleGenerator: r must be > 0, got {self.r}")

    @property
    def matrix(self) -> np.ndarray:
        return self.r * rotation(self.alpha)


def pushforward_law(gen: RotScaleGenerator, sigma: float = 0.0) -> GaussianDist:
    """Law of A x + sigma * eps for x ~ N(0, I); the rotation cancels in A A^T."""
    return GaussianDist.isotropic(2, math.sqrt(gen.r ** 2 + sigma ** 2))


def linear_pushforward(matrix: np.ndarray, source: GaussianDist) -> GaussianDist:
    a = np.asarray(matrix, dtype=np.float64)
    cov = a @ source.cov @ a.T
    return GaussianDist(a @ source.mean, 0.5 * (cov + cov.T))


def transport_cost(r: float, alpha: float) -> float:
    """E||x - r C(alpha) x||^2 for x ~ N(0, I_2)."""
    return 2.0 * (1.0 + r * r - 2.0 * r * math.cos(alpha))


OMEGA_MODES = ("uniform", "sigma2-loguniform")


@dataclass(frozen=True)
class SurfaceTerms:
    kl_term: float
    cost_term: float
    total: float


def kl_ensemble(
    r: float,
    schedule: NoiseSchedule,
    target_std: float = 1.5,
    omega: str = "uniform",
    steps: int = 256,
    sigma_range: tuple[float, float] = (0.1, 40.0),
) -> float:
    """Weighted integral over noise levels of KL(generator law || target law).

    ``uniform``: omega = 1/T on [sigma_min, T], composite Simpson on a
    log-spaced grid. ``sigma2-loguniform``: E[sigma^2 KL] with log sigma
    uniform on ``sigma_range``; this is the expectation the trainer estimates
    in sigma2 mode.
    """
    if steps < 16:
        raise ValidationError(f"quadrature steps must be >= 16, got {steps}")
    gen = RotScaleGenerator(r, 0.0)
    target = GaussianDist.isotropic(2, target_std)

    def kl_at(s: float) -> float:
        return kl_gaussian(pushforward_law(gen, s), target.perturbed(s))

    if omega == "uniform":
        nodes = np.geomspace(schedule.sigma_min, schedule.T, steps)
        values = np.array([kl_at(s) for s in nodes]) / schedule.T
        return float(simpson(values, x=nodes))
    if omega == "sigma2-loguniform":
        lo, hi = sigma_range
        u = np.linspace(math.log(lo), math.log(hi), steps)
        nodes = np.exp(u)
        values = np.array([s * s * kl_at(s) for s in nodes])
        return float(simpson(values, x=u) / (u[-1] - u[0]))
    raise ValidationError(f"unknown omega mode {omega!r}; expected one of {OMEGA_MODES}")


def surface_terms(r: float, alpha: float, lam: float, schedule: NoiseSchedule, **kw) -> SurfaceTerms:
    kl = kl_ensemble(r, schedule, **kw)
    cost = transport_cost(r, alpha)
    return SurfaceTerms(kl, cost, kl + lam * cost)


def rdmd_surface(r: float, alpha: float, lam: float, schedule: NoiseSchedule, **kw) -> float:
    return surface_terms(r, alpha, lam, schedule, **kw).total


def rdmd_surface_grad(r: float, alpha: float, lam: float, schedule: NoiseSchedule, h: float = 1e-5, **kw) -> np.ndarray:
    """Central differences of the surface in (r, alpha)."""
    dr = (rdmd_surface(r + h, alpha, lam, schedule, **kw) - rdmd_surface(r - h, alpha, lam, schedule, **kw)) / (2 * h)
    da = (rdmd_surface(r, alpha + h, lam, schedule, **kw) - rdmd_surface(r, alpha - h, lam, schedule, **kw)) / (2 * h)
    return np.array([dr, da])


def surface_grid(
    r_values: np.ndarray,
    alpha_values: np.ndarray,
    lam: float,
    schedule: NoiseSchedule,
    **kw,
) -> pd.DataFrame:
    # the KL term only depends on r
    kl_by_r = {float(r): kl_ensemble(float(r), schedule, **kw) for r in r_values}
    rows = []
    for r in r_values:
        for a in alpha_values:
            kl = kl_by_r[float(r)]
            cost = transport_cost(float(r), float(a))
            rows.append({"r": float(r), "alpha": float(a), "kl_term": kl, "cost_term": cost, "total": kl + lam * cost})
    return pd.DataFrame(rows, columns=["r", "alpha", "kl_term", "cost_term", "total"])


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale:
        raise ValidationError("matrix square root: input is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if vals.min() <= 0:
        raise ValidationError("matrix square root: input is not positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def ot_map_gaussian(source: GaussianDist, target: GaussianDist) -> tuple[np.ndarray, np.ndarray]:
    """Monge map x -> M x + b for the quadratic cost between two Gaussians."""
    if source.dim != target.dim:
        raise ShapeError(f"ot_map_gaussian: dimensions {source.dim} and {target.dim} differ")
    root = _sqrtm_psd(source.cov)
    inv_root = np.linalg.inv(root)
    middle = root @ target.cov @ root
    m = inv_root @ _sqrtm_psd(0.5 * (middle + middle.T)) @ inv_root
    m = 0.5 * (m + m.T)
    return m, target.mean - m @ source.mean


def apply_linear_map(x: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ matrix.T + offset
