"""Axis-aligned boxes and uniform ball sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi] in R^d."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if np.any(hi < lo):
            raise ValueError("box upper bounds must dominate lower bounds")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def diam_inf(self) -> float:
        """Largest side length (sup-norm diameter)."""
        return float(np.max(self.hi - self.lo))

    @property
    def min_side(self) -> float:
        return float(np.min(self.hi - self.lo))

    @property
    def radius(self) -> float:
        """Radius of the circumscribed ball."""
        return float(np.linalg.norm(self.hi - self.lo) / 2.0)

    def contains(self, x, slack: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - slack) and np.all(x <= self.hi + slack))


def sample_uniform_ball(rng, center, radius, n=None):
    """Uniform samples from the closed Euclidean ball around ``center``.

    Direction comes from a normalized Gaussian vector and the radius is
    scaled by U^(1/d), which gives the exact uniform law in any dimension.
    With ``n=None`` a single point is returned, otherwise an (n, d) array.
    """
    center = np.asarray(center, dtype=float)
    d = center.size
    m = 1 if n is None else int(n)
    v = rng.standard_normal((m, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    u = rng.random((m, 1)) ** (1.0 / d)
    pts = center + radius * u * (v / norms)
    return pts[0] if n is None else pts
