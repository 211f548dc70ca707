from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rdmd_lab.errors import ValidationError

# slack for sigma values produced by exp(log(.)) round trips
_RANGE_TOL = 1e-9


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-exploding schedule with sigma(t) = t on [sigma_min, T]."""

    sigma_min: float = 0.01
    T: float = 80.0

    def __post_init__(self) -> None:
        if not (0.0 < self.sigma_min < self.T):
            raise ValidationError(f"schedule needs 0 < sigma_min < T, got sigma_min={self.sigma_min} T={self.T}")

    def sigma(self, t):
        return np.asarray(t, dtype=np.float64)

    def g2(self, t):
        # d(sigma^2)/dt
        return 2.0 * np.asarray(t, dtype=np.float64)

    def contains(self, sigma) -> bool:
        s = np.asarray(sigma, dtype=np.float64)
        lo = self.sigma_min * (1.0 - _RANGE_TOL)
        hi = self.T * (1.0 + _RANGE_TOL)
        return bool(np.all((s >= lo) & (s <= hi)))

    def check(self, sigma, what: str = "sigma") -> None:
        if not self.contains(sigma):
            s = np.asarray(sigma, dtype=np.float64)
            raise ValidationError(
                f"{what} outside schedule range [{self.sigma_min}, {self.T}]: "
                f"min={float(s.min()):.6g} max={float(s.max()):.6g}"
            )

    def clip(self, sigma) -> np.ndarray:
        return np.clip(np.asarray(sigma, dtype=np.float64), self.sigma_min, self.T)

    def karras_grid(self, steps: int, rho: float = 7.0) -> np.ndarray:
        """steps + 1 noise levels from T down to sigma_min, denser near sigma_min."""
        if steps < 1:
            raise ValidationError(f"karras_grid: steps must be >= 1, got {steps}")
        ramp = np.arange(steps + 1, dtype=np.float64) / steps
        max_inv_rho = self.T ** (1.0 / rho)
        min_inv_rho = self.sigma_min ** (1.0 / rho)
        grid = (max_inv_rho + ramp * (min_inv_rho - max_inv_rho)) ** rho
        grid[0], grid[-1] = self.T, self.sigma_min
        return grid

    def to_dict(self) -> dict:
        return {"sigma_min": self.sigma_min, "T": self.T}
