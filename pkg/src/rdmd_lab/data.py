from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from rdmd_lab.errors import ShapeError, ValidationError
from rdmd_lab.oracles import AnalyticDistribution, GaussianDist, eight_gaussians

Sampler = Callable[[int, "Rng"], np.ndarray]


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    digest = hashlib.sha256(("/".join((str(seed),) + path)).encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


class Rng:
    """Seeded stream on the counter-based Philox generator.

    ``split(label)`` gives a child stream keyed by (seed, path of labels); it
    does not depend on how much of the parent stream was consumed.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()) -> None:
        if not (0 <= int(seed) < 2 ** 64):
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def split(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, high: int, size) -> np.ndarray:
        return self._gen.integers(0, high, size)

    def choice(self, k: int, size: int, p=None) -> np.ndarray:
        return self._gen.choice(k, size=size, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '-'})"


@dataclass(frozen=True, eq=False)
class PairSet:
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.outputs, dtype=np.float64)
        if x.ndim != 2 or x.shape != y.shape:
            raise ShapeError(f"PairSet: inputs {x.shape} and outputs {y.shape} must be equal (N, d) arrays")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def _check_n(n: int) -> None:
    if n < 1:
        raise ValidationError(f"sample count must be >= 1, got {n}")


def sample_source_gaussian(n: int, rng: Rng, dim: int = 2) -> np.ndarray:
    _check_n(n)
    return rng.normal((n, dim))


def sample_8gaussians(n: int, rng: Rng, radius: float = 10.0, std: float = 0.5) -> np.ndarray:
    _check_n(n)
    return eight_gaussians(radius, std).sample(n, rng)


def build_distribution(kind: str, *, dim: int = 2, std: float = 1.0, radius: float = 10.0) -> AnalyticDistribution:
    if kind == "gaussian":
        return GaussianDist.isotropic(dim, std)
    if kind == "8gaussians":
        if dim != 2:
            raise ValidationError("8gaussians is a planar distribution (dim must be 2)")
        return eight_gaussians(radius, std)
    raise ValidationError(f"unknown distribution kind {kind!r}; expected 'gaussian' or '8gaussians'")


class FiniteSampler:
    """Draws batches with replacement from a fixed sample set."""

    def __init__(self, samples: np.ndarray) -> None:
        self.samples = np.asarray(samples, dtype=np.float64)

    def __call__(self, n: int, rng: Rng) -> np.ndarray:
        return self.samples[rng.integers(self.samples.shape[0], n)]


class FreshSampler:
    def __init__(self, dist: AnalyticDistribution) -> None:
        self.dist = dist

    def __call__(self, n: int, rng: Rng) -> np.ndarray:
        return self.dist.sample(n, rng)


def make_sampler(dist: AnalyticDistribution, n_samples: int | None, rng: Rng) -> Sampler:
    """Fixed training set of ``n_samples`` points, or fresh draws when None."""
    if n_samples is None:
        return FreshSampler(dist)
    _check_n(n_samples)
    return FiniteSampler(dist.sample(n_samples, rng))


def parse_distribution_spec(spec: str, dim: int = 2) -> AnalyticDistribution:
    """``8gaussians[:radius,std]`` or ``gaussian[:std]``."""
    kind, _, args = spec.strip().partition(":")
    try:
        values = [float(v) for v in args.split(",")] if args else []
    except ValueError:
        raise ValidationError(f"bad distribution spec {spec!r}: arguments must be numbers") from None
    if kind == "8gaussians":
        if len(values) not in (0, 2):
            raise ValidationError(f"bad distribution spec {spec!r}: expected 8gaussians[:radius,std]")
        radius, std = values or (10.0, 0.5)
        return build_distribution(kind, dim=dim, std=std, radius=radius)
    if kind == "gaussian":
        if len(values) > 1:
            raise ValidationError(f"bad distribution spec {spec!r}: expected gaussian[:std]")
        return build_distribution(kind, dim=dim, std=values[0] if values else 1.5)
    raise ValidationError(f"bad distribution spec {spec!r}: unknown kind {kind!r}")
