"""Canonical-form plant, sinusoidal references and measurement generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box
from .gp_core import TrainingPair


@dataclass(frozen=True)
class PlantSpec:
    """Chain of integrators with nonlinearity in the last derivative.

    ``f`` is unknown to the controller (the learning target); ``g`` is
    known and must be positive on the domain.
    """

    dx: int
    f: object
    g: object
    domain: Box
    lipschitz_f: float


def _sinlog_f(x) -> float:
    return 1.0 - math.sin(float(x[0])) + 1.0 / (1.0 + math.exp(-float(x[1])))


def sinlog_plant(domain: Box | None = None) -> PlantSpec:
    """Default second-order benchmark plant.

    f(x) = 1 - sin(x1) + logistic(x2), g = 1. The partial derivatives
    are bounded by 1 and 1/4, so L_f = 1.25 is a safe Lipschitz constant.
    """
    if domain is None:
        domain = Box(np.array([-1.6, -1.6]), np.array([1.6, 1.6]))
    return PlantSpec(dx=2, f=_sinlog_f, g=lambda x: 1.0, domain=domain,
                     lipschitz_f=1.25)


def dynamics(x, u, spec: PlantSpec) -> np.ndarray:
    """State derivative of the integrator chain."""
    x = np.asarray(x, dtype=float)
    xdot = np.empty(spec.dx)
    xdot[:-1] = x[1:]
    xdot[-1] = float(spec.f(x)) + float(spec.g(x)) * float(u)
    return xdot


def integrate_step(x, u, h: float, spec: PlantSpec) -> np.ndarray:
    """One fixed-step RK4 step with the input held over the step."""
    if h <= 0.0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    k1 = dynamics(x, u, spec)
    k2 = dynamics(x + 0.5 * h * k1, u, spec)
    k3 = dynamics(x + 0.5 * h * k2, u, spec)
    k4 = dynamics(x + h * k3, u, spec)
    out = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("state became non-finite during integration")
    return out


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Sinusoidal reference amp*sin(2 pi t / period) and its derivatives.

    ``state(t)`` stacks derivatives 0..dx-1, ``feedforward(t)`` is the
    dx-th derivative used by the linearizing controller. Exactly
    periodic with the configured period.
    """

    amplitude: float
    period: float
    dx: int = 2
    omega: float = field(init=False)

    def __post_init__(self):
        if self.amplitude <= 0.0 or self.period <= 0.0:
            raise ValueError("amplitude and period must be positive")
        if not 1 <= self.dx <= 4:
            raise ValueError("dx must lie in 1..4")
        object.__setattr__(self, "omega", 2.0 * math.pi / self.period)

    def _deriv(self, t: float, k: int) -> float:
        # d^k/dt^k sin(w t) = w^k sin(w t + k pi/2)
        return self.amplitude * self.omega**k * math.sin(
            self.omega * t + k * math.pi / 2.0
        )

    def state(self, t: float) -> np.ndarray:
        return np.array([self._deriv(t, k) for k in range(self.dx)])

    def feedforward(self, t: float) -> float:
        return self._deriv(t, self.dx)

    @property
    def lipschitz(self) -> float:
        """Bound on ||d/dt state||, conservative for any phase."""
        w = self.omega
        return self.amplitude * w * math.sqrt(
            sum(w ** (2 * k) for k in range(self.dx))
        )


def reference(t: float, traj: ReferenceTrajectory) -> tuple[np.ndarray, float]:
    return traj.state(t), traj.feedforward(t)


def sample_measurement(x, spec: PlantSpec, noise_std: float, rng,
                       t: float = 0.0) -> TrainingPair:
    """Noisy observation of the unknown dynamics at the exact state.

    Inputs are noise-free; the target is f(x) plus centered Gaussian
    noise with standard deviation ``noise_std``.
    """
    x = np.asarray(x, dtype=float).copy()
    y = float(spec.f(x)) + noise_std * float(rng.standard_normal())
    return TrainingPair(x, y, t)
