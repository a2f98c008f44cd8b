"""Feedback-linearizing tracking control with a Lyapunov ultimate bound.

The controller cancels the learned nonlinearity and applies a linear
stabilizer, so the tracking error follows companion-form dynamics plus
a bounded model-error disturbance. The ultimate bound on the error norm
follows from a Lyapunov argument and is computable from the error-bound
level along the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LYAP_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class ControllerConfig:
    """Gain, Hurwitz coefficients and the Lyapunov right-hand side Q."""

    gain: float
    lambdas: np.ndarray
    q_matrix: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambdas, dtype=float))
        q = np.asarray(self.q_matrix, dtype=float)
        if self.gain <= 0.0:
            raise ValueError("gain must be positive")
        dx = lam.size + 1
        if q.shape != (dx, dx):
            raise ValueError(f"Q must be {dx}x{dx}")
        if not np.allclose(q, q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if np.any(np.linalg.eigvalsh(q) <= 0.0):
            raise ValueError("Q must be positive definite")
        object.__setattr__(self, "gain", float(self.gain))
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "q_matrix", q)

    @property
    def dx(self) -> int:
        return self.lambdas.size + 1

    @property
    def feedback_row(self) -> np.ndarray:
        """Coefficients of nu = -gain * [lambda_1 .. lambda_{dx-1} 1] e."""
        return np.append(self.lambdas, 1.0)


def is_hurwitz(a: np.ndarray, tol: float = 0.0) -> bool:
    return bool(np.all(np.linalg.eigvals(a).real < -tol))


def companion_matrix(lambdas, gain) -> np.ndarray:
    """Closed-loop error dynamics matrix A.

    Top block [0 I]; bottom row -gain * [lambda_1 .. lambda_{dx-1} 1].
    dx = 1 degenerates to the scalar [-gain]. Raises if the result is
    not Hurwitz (bad coefficient choice).
    """
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lam.size == 0 or (lam.size == 1 and lam[0] == 0.0):
        a = np.array([[-float(gain)]])
    else:
        dx = lam.size + 1
        a = np.zeros((dx, dx))
        a[:-1, 1:] = np.eye(dx - 1)
        a[-1, :] = -float(gain) * np.append(lam, 1.0)
    if not is_hurwitz(a):
        raise ValueError("companion matrix is not Hurwitz; adjust lambdas/gain")
    return a


def solve_lyapunov(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve A^T P + P A = -Q through the vectorized linear system.

    The Kronecker construction is exact and cheap at these sizes. The
    result is symmetrized and validated: residual below 1e-8 and P
    positive definite.
    """
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    n = a.shape[0]
    if not is_hurwitz(a):
        raise ValueError("A must be Hurwitz")
    m = np.kron(np.eye(n), a.T) + np.kron(a.T, np.eye(n))
    p = np.linalg.solve(m, -q.reshape(n * n, order="F")).reshape((n, n), order="F")
    p = 0.5 * (p + p.T)
    residual = np.linalg.norm(a.T @ p + p @ a + q)
    if residual > LYAP_RESIDUAL_TOL:
        raise ArithmeticError(f"Lyapunov residual {residual:.3e} above tolerance")
    if np.any(np.linalg.eigvalsh(p) <= 0.0):
        raise ArithmeticError("Lyapunov solution is not positive definite")
    return p


def gain_condition(p: np.ndarray, q: np.ndarray, lip_f: float,
                   lip_mu: float) -> tuple[bool, float]:
    """Strict smallness check on the last Lyapunov column.

    Requires ||p_d|| < lambda_min(Q) / (2 (L_f + L_mu)); returns the
    verdict together with the margin (threshold minus ||p_d||).
    """
    pd = np.linalg.norm(p[:, -1])
    total = lip_f + lip_mu
    if total <= 0.0:
        return True, math.inf
    threshold = float(np.min(np.linalg.eigvalsh(q))) / (2.0 * total)
    return pd < threshold, threshold - pd


def fl_control(x, t, mean_fn, ref, config: ControllerConfig, g_fn) -> float:
    """Feedback-linearizing input u = (-mu(x) + nu + ref feedforward)/g(x)."""
    x = np.asarray(x, dtype=float)
    gval = float(g_fn(x))
    if gval <= 0.0:
        raise ArithmeticError("input gain g(x) must be positive")
    e = x - np.asarray(ref.state(t), dtype=float)
    nu = -config.gain * float(config.feedback_row @ e)
    return (-float(mean_fn(x)) + nu + float(ref.feedforward(t))) / gval


def tracking_bound_core(pd_norm, lam_max_p, lam_min_p, lam_min_q,
                        lip_total, eta_max) -> float:
    """Ultimate tracking-error bound from scalar Lyapunov data.

    theta = 2 ||p_d|| sqrt(lmax(P)) eta_max
            / ((lmin(Q) - 2 ||p_d|| lip_total) sqrt(lmin(P))).
    Raises when the gain condition fails (denominator non-positive).
    """
    denom = lam_min_q - 2.0 * pd_norm * lip_total
    if denom <= 0.0:
        raise ArithmeticError("gain condition violated; ultimate bound undefined")
    return 2.0 * pd_norm * math.sqrt(lam_max_p) * eta_max / (denom * math.sqrt(lam_min_p))


@dataclass
class TrackingBoundParams:
    """Lyapunov data plus the running error-bound level along the reference."""

    p_matrix: np.ndarray
    q_matrix: np.ndarray
    lip_f: float
    lip_mu: float
    eta_max: float
    pd_norm: float = field(init=False)
    lam_max_p: float = field(init=False)
    lam_min_p: float = field(init=False)
    lam_min_q: float = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.p_matrix, dtype=float)
        q = np.asarray(self.q_matrix, dtype=float)
        self.pd_norm = float(np.linalg.norm(p[:, -1]))
        ep = np.linalg.eigvalsh(p)
        self.lam_max_p = float(ep[-1])
        self.lam_min_p = float(ep[0])
        self.lam_min_q = float(np.min(np.linalg.eigvalsh(q)))

    def value(self) -> float:
        return tracking_bound_core(
            self.pd_norm, self.lam_max_p, self.lam_min_p, self.lam_min_q,
            self.lip_f + self.lip_mu, self.eta_max,
        )


def tracking_bound(params: TrackingBoundParams) -> float:
    return params.value()
