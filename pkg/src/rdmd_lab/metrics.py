from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from rdmd_lab.data import PairSet, Rng
from rdmd_lab.errors import ShapeError, ValidationError

# rows per cdist block; keeps 5000 x 5000 evaluations out of one allocation
_BLOCK = 1024


def _check_pairs(pairs: PairSet) -> None:
    if len(pairs) == 0:
        raise ValidationError("pair set is empty")


def transport_cost_sq(pairs: PairSet) -> float:
    """Mean squared transport cost E||x - G(x)||^2 (the optimized objective)."""
    _check_pairs(pairs)
    diff = pairs.outputs - pairs.inputs
    return float(np.mean(np.sum(diff * diff, axis=1)))


def transport_cost_rms(pairs: PairSet) -> float:
    """Root of the per-coordinate MSE between inputs and outputs."""
    _check_pairs(pairs)
    diff = pairs.outputs - pairs.inputs
    return float(np.sqrt(np.mean(diff * diff)))


def _mean_pairwise_distance(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for start in range(0, a.shape[0], _BLOCK):
        total += float(cdist(a[start:start + _BLOCK], b).sum())
    return total / (a.shape[0] * b.shape[0])


def _as_samples(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValidationError(f"{what} must be a non-empty (n, d) array, got shape {arr.shape}")
    return arr


def energy_distance(a, b) -> float:
    """2E||A - B|| - E||A - A'|| - E||B - B'|| over all pairs (V-statistic)."""
    a = _as_samples(a, "energy_distance: a")
    b = _as_samples(b, "energy_distance: b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"energy_distance: dimensions {a.shape[1]} and {b.shape[1]} differ")
    ab = _mean_pairwise_distance(a, b)
    ba = _mean_pairwise_distance(b, a)
    return float((ab + ba) - (_mean_pairwise_distance(a, a) + _mean_pairwise_distance(b, b)))


def sliced_w2(a, b, n_projections: int, rng: Rng, n_quantiles: int = 512) -> float:
    """Mean over random unit directions of the squared 1D W2 between projections."""
    a = _as_samples(a, "sliced_w2: a")
    b = _as_samples(b, "sliced_w2: b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sliced_w2: dimensions {a.shape[1]} and {b.shape[1]} differ")
    if n_projections < 1:
        raise ValidationError(f"sliced_w2: n_projections must be >= 1, got {n_projections}")
    dirs = rng.normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        levels = (np.arange(n_quantiles) + 0.5) / n_quantiles
        pa = np.quantile(pa, levels, axis=0)
        pb = np.quantile(pb, levels, axis=0)
    return float(np.mean((pa - pb) ** 2))


def _orientation(p: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])


def count_crossings(starts: np.ndarray, ends: np.ndarray) -> int:
    """Number of properly intersecting segment pairs; touching endpoints do not count."""
    a, b = starts[:, None, :], ends[:, None, :]
    c, d = starts[None, :, :], ends[None, :, :]
    o1 = _orientation(a, b, c)
    o2 = _orientation(a, b, d)
    o3 = _orientation(c, d, a)
    o4 = _orientation(c, d, b)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    return int(np.triu(crossing, k=1).sum())


def crossing_count(pairs: PairSet, m: int, rng: Rng) -> int:
    if m < 2:
        raise ValidationError(f"crossing_count: m must be >= 2, got {m}")
    if pairs.dim != 2:
        raise ValidationError(f"crossing_count: segments must be planar, got dimension {pairs.dim}")
    idx = np.arange(len(pairs)) if m >= len(pairs) else np.sort(rng.permutation(len(pairs))[:m])
    return count_crossings(pairs.inputs[idx], pairs.outputs[idx])


def evaluate_pairs(
    pairs: PairSet,
    target_samples: np.ndarray,
    rng: Rng,
    n_projections: int = 128,
    crossing_m: int = 200,
) -> dict[str, float]:
    return {
        "transport_cost_rms": transport_cost_rms(pairs),
        "transport_cost_sq": transport_cost_sq(pairs),
        "energy_distance": energy_distance(pairs.outputs, target_samples),
        "sliced_w2": sliced_w2(pairs.outputs, target_samples, n_projections, rng.split("sliced_w2")),
        "crossing_count": crossing_count(pairs, crossing_m, rng.split("crossings")),
    }
