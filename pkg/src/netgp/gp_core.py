"""Exact Gaussian process regression on small data sets.

Each model holds at most ``capacity`` training pairs, keeps a Cholesky
factor of K + noise_std^2 I current through O(n^2) row appends, and
exposes conservative Lipschitz bounds for its posterior mean and
standard deviation. Hyperparameters are fixed; there is no online
hyperparameter learning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

# Posterior variances below this are floored before any division.
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class KernelHyper:
    """Squared-exponential kernel hyperparameters.

    ``signal_std`` and every lengthscale must be strictly positive;
    ``noise_std`` may be zero (noise-free targets).
    """

    signal_std: float
    lengthscales: np.ndarray
    noise_std: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if self.signal_std <= 0.0:
            raise ValueError("signal_std must be positive")
        if np.any(ls <= 0.0):
            raise ValueError("lengthscales must be positive")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be non-negative")
        object.__setattr__(self, "signal_std", float(self.signal_std))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @property
    def signal_var(self) -> float:
        return self.signal_std**2

    @property
    def noise_var(self) -> float:
        return self.noise_std**2


@dataclass(frozen=True)
class TrainingPair:
    """One streaming observation: exact input, noisy scalar target."""

    x: np.ndarray
    y: float
    t: float = 0.0
    uid: int = -1

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError("training input has non-finite entries")
        if not math.isfinite(self.y):
            raise ValueError("training target is non-finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "t", float(self.t))


def se_kernel(x, x2, hyper: KernelHyper) -> float:
    """Squared-exponential covariance k(x, x2).

    Returns signal_std^2 * exp(-sum_i (x_i - x2_i)^2 / (2 l_i^2)).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.size != hyper.dim or x2.size != hyper.dim:
        raise ValueError(
            f"kernel inputs must have dimension {hyper.dim}, "
            f"got {x.size} and {x2.size}"
        )
    r = (x - x2) / hyper.lengthscales
    return hyper.signal_var * math.exp(-0.5 * float(r @ r))


def se_kernel_vec(X, x, hyper: KernelHyper) -> np.ndarray:
    """Covariance row k(X_i, x) for stacked inputs X of shape (n, d)."""
    diff = (X - x) / hyper.lengthscales
    return hyper.signal_var * np.exp(-0.5 * np.einsum("ij,ij->i", diff, diff))


def se_kernel_matrix(X, Z, hyper: KernelHyper) -> np.ndarray:
    diff = (X[:, None, :] - Z[None, :, :]) / hyper.lengthscales
    return hyper.signal_var * np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))


def kernel_lipschitz(hyper: KernelHyper) -> float:
    """Lipschitz constant of the SE kernel in one argument.

    The gradient magnitude of k(., x2) is maximized one lengthscale away
    from x2, giving signal_std^2 / (min_i l_i * sqrt(e)).
    """
    return hyper.signal_var / (float(np.min(hyper.lengthscales)) * math.sqrt(math.e))


class LocalGPModel:
    """Exact GP posterior with incremental Cholesky row appends.

    Buffers are preallocated at ``capacity`` so the per-update cost is a
    kernel row plus two triangular solves, O(n^2) for n stored pairs.
    """

    def __init__(self, hyper: KernelHyper, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.hyper = hyper
        self.capacity = int(capacity)
        self.n = 0
        d = hyper.dim
        self._X = np.empty((capacity, d))
        self._y = np.empty(capacity)
        self._t = np.empty(capacity)
        self._uid = np.full(capacity, -1, dtype=np.int64)
        self._L = np.zeros((capacity, capacity))
        self._z = np.empty(capacity)  # forward solve of L z = y
        self._alpha = np.empty(capacity)  # (K + noise I)^{-1} y
        self._lmu_max = 0.0

    def __len__(self) -> int:
        return self.n

    @property
    def inputs(self) -> np.ndarray:
        return self._X[: self.n]

    @property
    def targets(self) -> np.ndarray:
        return self._y[: self.n]

    @property
    def uids(self) -> np.ndarray:
        return self._uid[: self.n]

    @property
    def chol(self) -> np.ndarray:
        return self._L[: self.n, : self.n]

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha[: self.n]

    @property
    def data(self) -> list[TrainingPair]:
        return [
            TrainingPair(self._X[i].copy(), self._y[i], self._t[i], int(self._uid[i]))
            for i in range(self.n)
        ]

    def update(self, pair: TrainingPair) -> "LocalGPModel":
        """Append one pair, extending the Cholesky factor by a row."""
        if self.n >= self.capacity:
            raise ValueError("model at capacity; split before updating")
        if pair.x.size != self.hyper.dim:
            raise ValueError("input dimension does not match kernel")
        n = self.n
        self._X[n] = pair.x
        self._y[n] = pair.y
        self._t[n] = pair.t
        self._uid[n] = pair.uid
        c = self.hyper.signal_var + self.hyper.noise_var
        if n == 0:
            self._L[0, 0] = math.sqrt(c)
            self._z[0] = pair.y / self._L[0, 0]
        else:
            b = se_kernel_vec(self._X[:n], pair.x, self.hyper)
            w = solve_triangular(self._L[:n, :n], b, lower=True, check_finite=False)
            d2 = c - float(w @ w)
            self._L[n, :n] = w
            self._L[n, n] = math.sqrt(max(d2, VAR_FLOOR))
            self._z[n] = (pair.y - float(w @ self._z[:n])) / self._L[n, n]
        self.n = n + 1
        self._alpha[: self.n] = solve_triangular(
            self._L[: self.n, : self.n],
            self._z[: self.n],
            lower=True,
            trans="T",
            check_finite=False,
        )
        self._refresh_lmu()
        return self

    def predict(self, x) -> tuple[float, float]:
        """Posterior mean and variance at ``x``.

        An empty model returns the prior (0, signal_std^2). The variance
        is reported unclamped; callers flooring it should use VAR_FLOOR.
        """
        if self.n == 0:
            return 0.0, self.hyper.signal_var
        x = np.asarray(x, dtype=float)
        k = se_kernel_vec(self._X[: self.n], x, self.hyper)
        mean = float(k @ self._alpha[: self.n])
        v = solve_triangular(
            self._L[: self.n, : self.n], k, lower=True, check_finite=False
        )
        var = self.hyper.signal_var - float(v @ v)
        return mean, var

    def _refresh_lmu(self):
        cur = kernel_lipschitz(self.hyper) * float(
            np.sum(np.abs(self._alpha[: self.n]))
        )
        if cur > self._lmu_max:
            self._lmu_max = cur

    def lipschitz(self) -> tuple[float, float]:
        """Conservative Lipschitz bounds (L_mu, L_sigma).

        L_mu is kernel_lipschitz * sum_i |alpha_i|, kept as a running
        maximum over updates so the report never decreases. L_sigma uses
        the closed form sqrt(2 L_k) (1 + 1/noise_var) signal_std, where
        1/noise_var caps the spectral norm of (K + noise I)^{-1}. Only
        conservativeness matters for the error-bound machinery.
        """
        if self.n == 0:
            return 0.0, 0.0
        lk = kernel_lipschitz(self.hyper)
        inv_norm_cap = 1.0 / max(self.hyper.noise_var, VAR_FLOOR)
        l_sigma = math.sqrt(2.0 * lk) * (1.0 + inv_norm_cap) * self.hyper.signal_std
        return self._lmu_max, l_sigma

    @classmethod
    def from_pairs(cls, hyper: KernelHyper, capacity: int, pairs) -> "LocalGPModel":
        """Batch construction via a dense Cholesky factorization."""
        pairs = list(pairs)
        if len(pairs) > capacity:
            raise ValueError("more pairs than capacity")
        model = cls(hyper, capacity)
        m = len(pairs)
        if m == 0:
            return model
        X = np.stack([p.x for p in pairs])
        y = np.array([p.y for p in pairs])
        K = se_kernel_matrix(X, X, hyper)
        K[np.diag_indices(m)] += hyper.noise_var
        try:
            L = np.linalg.cholesky(K)
        except np.linalg.LinAlgError as exc:
            raise ValueError(
                "kernel matrix not positive definite (duplicate inputs with "
                "zero noise_std?)"
            ) from exc
        model._X[:m] = X
        model._y[:m] = y
        model._t[:m] = [p.t for p in pairs]
        model._uid[:m] = [p.uid for p in pairs]
        model._L[:m, :m] = L
        model._z[:m] = solve_triangular(L, y, lower=True, check_finite=False)
        model._alpha[:m] = solve_triangular(
            L, model._z[:m], lower=True, trans="T", check_finite=False
        )
        model.n = m
        model._refresh_lmu()
        return model


def gp_update(model: LocalGPModel, pair: TrainingPair) -> LocalGPModel:
    """Append ``pair`` to ``model`` in place and return it."""
    return model.update(pair)


def gp_predict(model: LocalGPModel, x) -> tuple[float, float]:
    return model.predict(x)


def mean_std_lipschitz(model: LocalGPModel) -> tuple[float, float]:
    return model.lipschitz()


def make_pair(x, y, t=0.0, uid=-1) -> TrainingPair:
    return TrainingPair(np.asarray(x, dtype=float), y, t, uid)


def with_uid(pair: TrainingPair, uid: int) -> TrainingPair:
    return replace(pair, uid=uid)
