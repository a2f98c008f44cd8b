"""Sampling-based identification of leaf models active near a reference tube.

The leaves that can matter over a future time window are found by
drawing uniform samples from balls around the reference trajectory and
collecting every positive-weight leaf hit; a closed-form lower bound on
the probability that no relevant leaf was overlooked accompanies each
call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, sample_uniform_ball
from .log_gp import LoGGPTree, SplitNode

R_MIN_FLOOR = 1e-12


@dataclass(frozen=True)
class WindowSpec:
    """Future time window and sampling budget for the active-model search."""

    t1: float
    t2: float
    dt: float
    n_samples: int
    zeta: float

    def __post_init__(self):
        if self.t2 <= self.t1:
            raise ValueError("window must have t2 > t1")
        if self.dt <= 0.0 or self.dt > self.t2 - self.t1:
            raise ValueError("dt must lie in (0, t2 - t1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.zeta <= 0.0:
            raise ValueError("zeta must be positive")


def subwindow_count(t1: float, t2: float, dt: float) -> int:
    """ceil((t2 - t1) / dt) with a guard against float overshoot."""
    return int(math.ceil((t2 - t1) / dt - 1e-9))


def compute_xi(zeta: float, dt: float, lip_ref: float, theta: float) -> float:
    """Ball radius covering one sub-step of the tube.

    xi = 2 zeta + lip_ref dt / 2 + theta, where theta bounds the tracking
    error at the sub-step and lip_ref the reference speed.
    """
    return 2.0 * zeta + lip_ref * dt / 2.0 + theta


def active_models(tree: LoGGPTree, window: WindowSpec, ref_fn, lip_ref,
                  theta_fn, rng) -> list[int]:
    """Leaf ids with positive weight anywhere in the sampled tube cover.

    For each sub-step j the ball around ref_fn(t1 + j dt) with radius
    compute_xi(..., theta_fn(t1 + j dt)) is sampled ``n_samples`` times.
    Deterministic under a fixed generator; per-sub-step child streams
    make the sampled union monotone in n_samples.
    """
    base = int(rng.integers(0, 2**63))
    steps = subwindow_count(window.t1, window.t2, window.dt)
    found: set[int] = set()
    for j in range(steps + 1):
        tj = window.t1 + j * window.dt
        xi = compute_xi(window.zeta, window.dt, lip_ref, theta_fn(tj))
        child = np.random.default_rng(
            np.random.SeedSequence(entropy=base, spawn_key=(j,))
        )
        pts = sample_uniform_ball(
            child, np.asarray(ref_fn(tj), dtype=float), xi, n=window.n_samples
        )
        found |= tree.active_leaves_batch(pts)
    return sorted(found)


def success_probability(leaf_count, t1, t2, dt, r_min, zeta, xi,
                        n_samples, dim) -> float:
    """Lower bound on the probability the sampled set misses nothing.

    1 - |L| ceil((t2-t1)/dt) (1 - min(r_min^d, zeta^d) / xi^d)^Ns,
    clamped to [0, 1].
    """
    if xi <= 0.0:
        raise ValueError("xi must be positive")
    ratio = min(r_min**dim, zeta**dim) / xi**dim
    fail = leaf_count * subwindow_count(t1, t2, dt) * (1.0 - ratio) ** n_samples
    return min(max(1.0 - fail, 0.0), 1.0)


def estimate_r_min(tree: LoGGPTree, domain: Box) -> float:
    """Radius of a ball certain to fit in every leaf's saturated region.

    Walks the split geometry: going left of a split caps the coordinate
    at center - o/2, going right floors it at center + o/2. Half the
    smallest surviving side length is a conservative lower estimate,
    floored at a tiny positive value when bands have swallowed a region.
    """
    best = math.inf
    stack: list[tuple[SplitNode | int, np.ndarray, np.ndarray]] = [
        (tree.root, domain.lo.copy(), domain.hi.copy())
    ]
    while stack:
        node, lo, hi = stack.pop()
        if isinstance(node, int):
            best = min(best, float(np.min(hi - lo)))
            continue
        llo, lhi = lo.copy(), hi.copy()
        lhi[node.dim] = min(lhi[node.dim], node.center - node.overlap / 2.0)
        rlo, rhi = lo.copy(), hi.copy()
        rlo[node.dim] = max(rlo[node.dim], node.center + node.overlap / 2.0)
        stack.append((node.left, llo, lhi))
        stack.append((node.right, rlo, rhi))
    return max(best / 2.0, R_MIN_FLOOR)
