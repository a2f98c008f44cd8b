"""Locally growing random tree of GP experts.

Streaming pairs are routed to leaves by sampling a saturating linear
probability at every split node. A leaf that reaches its capacity is
replaced by a new split whose two children re-partition its data.
Predictions aggregate the posteriors of positive-weight leaves with a
generalized product-of-experts rule, optionally restricted to a leaf
subset staged in local memory, and a probabilistic uniform error bound
is computable on a compact box domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box
from .gp_core import VAR_FLOOR, KernelHyper, LocalGPModel, TrainingPair

# Minimum overlap band width; keeps the ramp well-defined when a leaf's
# data has zero spread along the split dimension.
MIN_OVERLAP = 1e-9


@dataclass
class SplitNode:
    """Binary split with a saturating linear routing probability.

    ``prob_right`` is 0 left of the band [center - o/2, center + o/2],
    1 right of it, and linear (Lipschitz constant 1/o) inside.
    """

    dim: int
    center: float
    overlap: float
    left: "SplitNode | int"
    right: "SplitNode | int"

    def prob_right(self, x) -> float:
        p = 0.5 + (float(x[self.dim]) - self.center) / self.overlap
        return min(max(p, 0.0), 1.0)

    def prob_right_batch(self, xs: np.ndarray) -> np.ndarray:
        return np.clip(0.5 + (xs - self.center) / self.overlap, 0.0, 1.0)


@dataclass(frozen=True)
class ErrorBoundParams:
    """Inputs of the uniform prediction error bound.

    ``delta`` is the failure probability, ``rho`` the grid resolution of
    the underlying covering argument, ``domain`` the compact box, and
    ``lipschitz_f`` a Lipschitz constant of the latent function. Setting
    ``literal_tau_bound`` replaces the rho factor on the standard
    deviation term by ``tau`` (the sampling time), reproducing the
    bound's published form verbatim instead of the dimensional reading.
    """

    delta: float
    rho: float
    domain: Box
    lipschitz_f: float
    literal_tau_bound: bool = False
    tau: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.rho <= 0.0:
            raise ValueError("rho must be positive")
        if self.lipschitz_f < 0.0:
            raise ValueError("lipschitz_f must be non-negative")


def beta_coefficient(delta, rho, dim, leaf_count, diam_inf) -> float:
    """Scaling factor of the standard-deviation term in the error bound.

    beta = 2 log(d^(d/2) |L| diam^d) - 2 log(delta 2^d rho^d), with the
    sup-norm diameter taken over the configured box domain.
    """
    if leaf_count < 1:
        raise ValueError("leaf_count must be positive")
    beta = 2.0 * (
        0.5 * dim * math.log(dim) + math.log(leaf_count) + dim * math.log(diam_inf)
    ) - 2.0 * (math.log(delta) + dim * math.log(2.0) + dim * math.log(rho))
    return beta


def poe_aggregate(weights, means, variances, prior_var) -> tuple[float, float]:
    """Generalized product-of-experts combination of leaf posteriors.

    Precision-weights each expert by weight/variance; variances are
    floored at VAR_FLOOR before division. With no experts (or all
    weights zero) the prior (0, prior_var) is returned.
    """
    if len(weights) == 0:
        return 0.0, prior_var
    ws = np.asarray(weights, dtype=float)
    vs = np.maximum(np.asarray(variances, dtype=float), VAR_FLOOR)
    prec = ws / vs
    s = float(np.sum(prec))
    if s <= 0.0:
        return 0.0, prior_var
    var = 1.0 / s
    mean = var * float(prec @ np.asarray(means, dtype=float))
    return mean, var


class LoGGPTree:
    """Binary tree of local GP models with sampled routing.

    The tree is single-writer: updates and splits are serialized by the
    caller; predictions are read-only.
    """

    def __init__(self, hyper: KernelHyper, capacity: int, overlap_frac: float = 0.1,
                 seed: int = 0, rng: np.random.Generator | None = None):
        if capacity < 2:
            raise ValueError("capacity must be at least 2 to allow splits")
        if not 0.0 < overlap_frac < 1.0:
            raise ValueError("overlap_frac must lie in (0, 1)")
        self.hyper = hyper
        self.capacity = int(capacity)
        self.overlap_frac = float(overlap_frac)
        self.seed = int(seed)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.root: SplitNode | int = 0
        self.leaves: dict[int, LocalGPModel] = {0: LocalGPModel(hyper, capacity)}
        self.pair_leaf: dict[int, int] = {}
        self.split_log: list[tuple[int, int, int]] = []  # (parent, left, right)
        self._split_children: dict[int, tuple[int, int]] = {}
        self.coverage_misses = 0
        self.total_pairs = 0
        self._next_leaf_id = 1
        self._next_uid = 0
        self._lmu_max = 0.0

    # ------------------------------------------------------------------
    # structure
    # ------------------------------------------------------------------

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def leaf_ids(self) -> list[int]:
        return sorted(self.leaves)

    def leaf(self, leaf_id: int) -> LocalGPModel:
        return self.leaves[leaf_id]

    def resolve_leaves(self, ids) -> set[int]:
        """Map possibly-retired leaf ids to their current descendants."""
        out: set[int] = set()
        stack = list(ids)
        while stack:
            lid = stack.pop()
            if lid in self.leaves:
                out.add(lid)
            elif lid in self._split_children:
                stack.extend(self._split_children[lid])
        return out

    @property
    def max_leaf_lmu(self) -> float:
        return self._lmu_max

    # ------------------------------------------------------------------
    # streaming updates
    # ------------------------------------------------------------------

    def _route(self, x, rng) -> int:
        node = self.root
        while not isinstance(node, int):
            p = node.prob_right(x)
            if p >= 1.0:
                go_right = True
            elif p <= 0.0:
                go_right = False
            else:
                go_right = bool(rng.random() < p)
            node = node.right if go_right else node.left
        return node

    def assign(self, pair: TrainingPair, rng=None) -> int:
        """Route ``pair`` to a leaf by sampled memberships and update it."""
        rng = rng if rng is not None else self.rng
        if pair.uid < 0:
            pair = replace(pair, uid=self._next_uid)
        self._next_uid = max(self._next_uid, pair.uid + 1)
        lid = self._route(pair.x, rng)
        model = self.leaves[lid]
        model.update(pair)
        self.pair_leaf[pair.uid] = lid
        self.total_pairs += 1
        lmu = model._lmu_max
        if lmu > self._lmu_max:
            self._lmu_max = lmu
        return lid

    def add(self, x, y, t=0.0, rng=None) -> tuple[int, int]:
        """Accept a streaming observation; split the leaf if it fills up.

        Returns (uid, leaf id the pair was stored in).
        """
        pair = TrainingPair(np.asarray(x, dtype=float), y, t, self._next_uid)
        lid = self.assign(pair, rng)
        if len(self.leaves[lid]) >= self.capacity:
            self.split_leaf(lid, rng)
        return pair.uid, lid

    def split_leaf(self, leaf_id: int, rng=None) -> tuple[int, int]:
        """Replace a full leaf by a split node with two sampled children.

        Memberships are re-drawn (up to 10 attempts) if a child ends up
        empty; the fallback is a deterministic median split. Ties among
        equal-spread dimensions break toward the lowest index.
        """
        rng = rng if rng is not None else self.rng
        model = self.leaves[leaf_id]
        m = len(model)
        if m < self.capacity:
            raise ValueError("leaf below capacity; nothing to split")
        X = model.inputs
        spread = X.max(axis=0) - X.min(axis=0)
        dim = int(np.argmax(spread))
        center = float(np.median(X[:, dim]))
        overlap = max(self.overlap_frac * float(spread[dim]), MIN_OVERLAP)
        node = SplitNode(dim, center, overlap, -1, -1)
        p = node.prob_right_batch(X[:, dim])
        right_mask = None
        for _ in range(10):
            mask = rng.random(m) < p
            if mask.any() and not mask.all():
                right_mask = mask
                break
        if right_mask is None:
            order = np.argsort(X[:, dim], kind="stable")
            right_mask = np.zeros(m, dtype=bool)
            right_mask[order[m // 2 :]] = True
        pairs = model.data
        left_pairs = [pairs[i] for i in range(m) if not right_mask[i]]
        right_pairs = [pairs[i] for i in range(m) if right_mask[i]]
        lid = self._next_leaf_id
        rid = self._next_leaf_id + 1
        self._next_leaf_id += 2
        node.left, node.right = lid, rid
        self.leaves[lid] = LocalGPModel.from_pairs(self.hyper, self.capacity, left_pairs)
        self.leaves[rid] = LocalGPModel.from_pairs(self.hyper, self.capacity, right_pairs)
        del self.leaves[leaf_id]
        for pr in left_pairs:
            self.pair_leaf[pr.uid] = lid
        for pr in right_pairs:
            self.pair_leaf[pr.uid] = rid
        self._replace_child(leaf_id, node)
        self.split_log.append((leaf_id, lid, rid))
        self._split_children[leaf_id] = (lid, rid)
        self._lmu_max = max(
            self._lmu_max, self.leaves[lid]._lmu_max, self.leaves[rid]._lmu_max
        )
        return lid, rid

    def _replace_child(self, leaf_id: int, node: SplitNode):
        if self.root == leaf_id:
            self.root = node
            return
        stack = [self.root]
        while stack:
            cur = stack.pop()
            if isinstance(cur, int):
                continue
            if cur.left == leaf_id:
                cur.left = node
                return
            if cur.right == leaf_id:
                cur.right = node
                return
            stack.extend((cur.left, cur.right))
        raise KeyError(f"leaf {leaf_id} not found in tree")

    # ------------------------------------------------------------------
    # prediction
    # ------------------------------------------------------------------

    def weights(self, x) -> list[tuple[int, float]]:
        """Positive path-probability weights at ``x``, sorted by leaf id.

        Weights multiply split probabilities along root-to-leaf paths;
        zero-weight leaves are omitted and the returned weights sum to 1.
        """
        x = np.asarray(x, dtype=float)
        out: list[tuple[int, float]] = []
        stack: list[tuple[SplitNode | int, float]] = [(self.root, 1.0)]
        while stack:
            node, w = stack.pop()
            if isinstance(node, int):
                out.append((node, w))
                continue
            p = node.prob_right(x)
            if p < 1.0:
                stack.append((node.left, w * (1.0 - p)))
            if p > 0.0:
                stack.append((node.right, w * p))
        out.sort()
        return out

    def active_leaf_ids(self, x) -> list[int]:
        return [lid for lid, _ in self.weights(x)]

    def active_leaves_batch(self, X) -> set[int]:
        """Union of positive-weight leaf ids over the rows of ``X``."""
        X = np.asarray(X, dtype=float)
        out: set[int] = set()
        stack: list[tuple[SplitNode | int, np.ndarray]] = [
            (self.root, np.arange(X.shape[0]))
        ]
        while stack:
            node, idx = stack.pop()
            if isinstance(node, int):
                out.add(node)
                continue
            p = node.prob_right_batch(X[idx, node.dim])
            li = idx[p < 1.0]
            ri = idx[p > 0.0]
            if li.size:
                stack.append((node.left, li))
            if ri.size:
                stack.append((node.right, ri))
        return out

    def _collect(self, x, allowed=None):
        """Leaf posteriors entering the aggregation at ``x``.

        Returns (ids, weights, means, variances, missed) where ``missed``
        flags any positive-weight leaf excluded by ``allowed``.
        """
        act = self.weights(x)
        missed = False
        if allowed is not None:
            kept = [(lid, w) for lid, w in act if lid in allowed]
            missed = len(kept) < len(act)
            act = kept
        ids, ws, means, vs = [], [], [], []
        for lid, w in act:
            mu, var = self.leaves[lid].predict(x)
            ids.append(lid)
            ws.append(w)
            means.append(mu)
            vs.append(var)
        return ids, ws, means, vs, missed

    def aggregate_predict(self, x) -> tuple[float, float]:
        _, ws, means, vs, _ = self._collect(x)
        return poe_aggregate(ws, means, vs, self.hyper.signal_var)

    def predict_restricted(self, x, allowed) -> tuple[float, float, bool]:
        """Aggregation over ``allowed`` only; counts coverage misses.

        A miss means a positive-weight leaf was excluded. If no active
        leaf survives the restriction, the prior is returned.
        """
        _, ws, means, vs, missed = self._collect(x, allowed=allowed)
        if missed:
            self.coverage_misses += 1
        mean, var = poe_aggregate(ws, means, vs, self.hyper.signal_var)
        return mean, var, missed

    def error_bound(self, x, params: ErrorBoundParams, allowed=None) -> float:
        """High-probability uniform bound eta(x) on |f - mean|.

        eta = sqrt(beta) sum_l w_l sigma~^2 / sigma_l + gamma, where
        gamma collects the Lipschitz covering slack. With ``allowed``
        given, sums run over the staged leaf subset (the restricted
        prediction's bound); beta always uses the full leaf count.
        """
        beta = beta_coefficient(
            params.delta, params.rho, self.hyper.dim, self.leaf_count,
            params.domain.diam_inf,
        )
        if beta <= 0.0:
            raise ValueError(
                "beta is non-positive; decrease rho or delta (or enlarge the domain)"
            )
        sqrt_beta = math.sqrt(beta)
        ids, ws, _, vs, _ = self._collect(x, allowed=allowed)
        if not ids:
            agg_var = self.hyper.signal_var
            return sqrt_beta * math.sqrt(agg_var) + params.lipschitz_f * params.rho
        vs = np.maximum(np.asarray(vs, dtype=float), VAR_FLOOR)
        ws = np.asarray(ws, dtype=float)
        prec = ws / vs
        agg_var = 1.0 / float(np.sum(prec))
        sig_term = float(np.sum(ws * agg_var / np.sqrt(vs)))
        std_slack = params.tau if params.literal_tau_bound else params.rho
        gamma = params.lipschitz_f * params.rho
        for lid, pr in zip(ids, prec):
            lmu, lsig = self.leaves[lid].lipschitz()
            gamma += (pr * agg_var) * (lmu * params.rho + sqrt_beta * lsig * std_slack)
        return sqrt_beta * sig_term + gamma

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        def encode(node):
            if isinstance(node, int):
                model = self.leaves[node]
                return {
                    "leaf": node,
                    "pairs": [
                        [list(map(float, p.x)), p.y, p.t, p.uid] for p in model.data
                    ],
                }
            return {
                "dim": node.dim,
                "center": node.center,
                "overlap": node.overlap,
                "left": encode(node.left),
                "right": encode(node.right),
            }

        return {
            "signal_std": self.hyper.signal_std,
            "lengthscales": list(map(float, self.hyper.lengthscales)),
            "noise_std": self.hyper.noise_std,
            "capacity": self.capacity,
            "overlap_frac": self.overlap_frac,
            "seed": self.seed,
            "split_log": [list(s) for s in self.split_log],
            "coverage_misses": self.coverage_misses,
            "root": encode(self.root),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "LoGGPTree":
        hyper = KernelHyper(
            blob["signal_std"], np.asarray(blob["lengthscales"]), blob["noise_std"]
        )
        tree = cls(hyper, blob["capacity"], blob["overlap_frac"], seed=blob["seed"])

        def decode(node_blob):
            if "leaf" in node_blob:
                lid = int(node_blob["leaf"])
                pairs = [
                    TrainingPair(np.asarray(x), y, t, int(uid))
                    for x, y, t, uid in node_blob["pairs"]
                ]
                model = LocalGPModel.from_pairs(hyper, tree.capacity, pairs)
                tree.leaves[lid] = model
                for p in pairs:
                    tree.pair_leaf[p.uid] = lid
                return lid
            return SplitNode(
                int(node_blob["dim"]),
                float(node_blob["center"]),
                float(node_blob["overlap"]),
                decode(node_blob["left"]),
                decode(node_blob["right"]),
            )

        tree.leaves.clear()
        tree.root = decode(blob["root"])
        tree.split_log = [tuple(s) for s in blob["split_log"]]
        tree._split_children = {p: (l, r) for p, l, r in tree.split_log}
        tree.coverage_misses = int(blob["coverage_misses"])
        tree.total_pairs = len(tree.pair_leaf)
        tree._next_uid = max(tree.pair_leaf, default=-1) + 1
        used = set(tree.leaves) | set(tree._split_children)
        for _, l, r in tree.split_log:
            used.update((l, r))
        tree._next_leaf_id = max(used, default=0) + 1
        tree._lmu_max = max(
            (m._lmu_max for m in tree.leaves.values()), default=0.0
        )
        return tree

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load_json(cls, path) -> "LoGGPTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------------
# operation-style wrappers
# ----------------------------------------------------------------------


def assign_and_update(tree: LoGGPTree, pair: TrainingPair, rng=None) -> int:
    return tree.assign(pair, rng)


def maybe_split(tree: LoGGPTree, leaf_id: int, rng=None) -> LoGGPTree:
    tree.split_leaf(leaf_id, rng)
    return tree


def weights(tree: LoGGPTree, x) -> list[tuple[int, float]]:
    return tree.weights(x)


def aggregate_predict(tree: LoGGPTree, x) -> tuple[float, float]:
    return tree.aggregate_predict(x)


def restricted_predict(tree: LoGGPTree, x, allowed) -> tuple[float, float]:
    mean, var, _ = tree.predict_restricted(x, allowed)
    return mean, var


def error_bound(tree: LoGGPTree, x, params: ErrorBoundParams) -> float:
    return tree.error_bound(x, params)
