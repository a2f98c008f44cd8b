"""Discrete-event local/cloud data exchange under bandwidth, delay and
memory limits.

Two logical processes share one channel. The local system collects
measurements, predicts from the leaf subset staged in its memory, and at
every interval boundary ships the previous working set to the cloud.
The cloud, holding the complete history, determines the leaf models
needed for the next reference window and sends their data back in time
for that window. Every training pair has exactly one custodian at any
instant (local, in flight, or cloud), which makes conservation and the
memory cap checkable everywhere.

Timing follows the channel law completion = dispatch + size/B + T_d with
exact real-valued timestamps; protocol decisions happen on the sampling
grid.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .active_set import (WindowSpec, active_models, compute_xi, estimate_r_min,
                         success_probability)
from .geometry import Box


class Custody(IntEnum):
    LOCAL = 0
    UPLOADING = 1
    DOWNLOADING = 2
    CLOUD = 3


class SimulationFault(RuntimeError):
    """A hard protocol invariant broke (memory overflow in strict mode,
    collection past the stop index, conservation mismatch)."""


@dataclass
class ChannelState:
    """Shared transmission channel; jobs serialize back to back."""

    bandwidth: float
    delay: float
    busy_until: float = 0.0

    def schedule(self, now: float, size: int) -> tuple[float, float]:
        start = max(now, self.busy_until)
        done = start + size / self.bandwidth + self.delay
        self.busy_until = done
        return start, done


@dataclass(frozen=True)
class TransferJob:
    direction: str          # "up" | "down"
    window: int             # interval index the payload serves
    size: int
    dispatch: float
    completion: float
    payload: tuple          # uids transmitted (copies included)
    moved: tuple            # uids whose custody transfers on completion


def transfer_time(size: int, channel: ChannelState) -> float:
    """Channel law: size / bandwidth + delay."""
    if size < 0:
        raise ValueError("size must be non-negative")
    return size / channel.bandwidth + channel.delay


def stopping_index(interval_sizes, q: int, mem_cap: int, mbar: int) -> float:
    """Stop index iota = q + first j with |D_j| > mem_cap/2 - mbar.

    Returns math.inf when no interval crosses the threshold.
    """
    if q < 1:
        raise ValueError("q must be at least 1")
    if mbar < 0:
        raise ValueError("mbar must be non-negative")
    threshold = mem_cap / 2.0 - mbar
    for j, size in enumerate(interval_sizes):
        if size > threshold:
            return q + j
    return math.inf


def mbar_tracker(history, q: int, cap: int) -> int:
    """Largest per-period growth of interval dataset sizes, capped.

    Before a full period of history exists the conservative cap
    (ceil(T_p / tau) in the scheduler) is returned.
    """
    history = list(history)
    if len(history) <= q:
        return cap
    growth = max(history[j + q] - history[j] for j in range(len(history) - q))
    return min(max(growth, 0), cap)


class MemoryLedger:
    """Custody tags per training pair plus the resident-pair cap.

    Resident pairs are those with custody LOCAL, UPLOADING (the source
    copy shadows the transfer until completion) or DOWNLOADING (space is
    reserved from dispatch).
    """

    def __init__(self, cap: int, strict: bool = True):
        self.cap = int(cap)
        self.strict = strict
        self.loc: dict[int, Custody] = {}
        self.counts = [0, 0, 0, 0]
        self.nonlocal_in_leaf: dict[int, int] = {}
        self.faults = 0

    @property
    def resident(self) -> int:
        c = self.counts
        return c[Custody.LOCAL] + c[Custody.UPLOADING] + c[Custody.DOWNLOADING]

    def admit(self, uid: int, leaf: int):
        if uid in self.loc:
            raise SimulationFault(f"pair {uid} admitted twice")
        self.loc[uid] = Custody.LOCAL
        self.counts[Custody.LOCAL] += 1
        self._check()

    def transition(self, uid: int, new: Custody, leaf: int):
        old = self.loc[uid]
        self.counts[old] -= 1
        self.counts[new] += 1
        self.loc[uid] = new
        delta = int(new != Custody.LOCAL) - int(old != Custody.LOCAL)
        if delta:
            self.nonlocal_in_leaf[leaf] = self.nonlocal_in_leaf.get(leaf, 0) + delta
            if self.nonlocal_in_leaf[leaf] == 0:
                del self.nonlocal_in_leaf[leaf]
        self._check()

    def rebuild_leaf(self, leaf: int, uids):
        n = sum(1 for uid in uids if self.loc.get(uid, Custody.LOCAL) != Custody.LOCAL)
        if n:
            self.nonlocal_in_leaf[leaf] = n
        else:
            self.nonlocal_in_leaf.pop(leaf, None)

    def drop_leaf(self, leaf: int):
        self.nonlocal_in_leaf.pop(leaf, None)

    def _check(self):
        if self.resident > self.cap:
            self.faults += 1
            if self.strict:
                raise SimulationFault(
                    f"local memory overflow: {self.resident} > {self.cap}"
                )


class LocalCloudExchange:
    """Interval-based double-buffered data exchange (local and cloud loops).

    The first two intervals are a bootstrap: everything stays local and
    every leaf is usable. The first boundary uploads a copy of the full
    history (custody unchanged), after which the cloud can compute the
    active-model set for window 2 and the steady paging cycle begins:
    at boundary j the stale part of the previous working set leaves
    local custody, and the payload for window j+1 arrives before the
    window starts. Learning stops once an interval working set crosses
    mem_cap/2 - mbar, q intervals later.
    """

    def __init__(self, tree, domain: Box, ref_fn, lip_ref, theta_fn, rng, *,
                 bandwidth: float, delay: float, mem_cap: int, interval: float,
                 q: int, tau: float, n_samples: int, subwindow: float,
                 zeta: float, mbar_cap: int, strict: bool = True):
        self.tree = tree
        self.domain = domain
        self.ref_fn = ref_fn
        self.lip_ref = float(lip_ref)
        self.theta_fn = theta_fn
        self.rng = rng
        self.channel = ChannelState(float(bandwidth), float(delay))
        self.ledger = MemoryLedger(mem_cap, strict)
        self.mem_cap = int(mem_cap)
        self.interval = float(interval)
        self.q = int(q)
        self.tau = float(tau)
        ticks = interval / tau
        if abs(ticks - round(ticks)) > 1e-9:
            raise ValueError("interval must be an integer multiple of tau")
        self.ticks_per_interval = int(round(ticks))
        self.n_samples = int(n_samples)
        self.subwindow = float(subwindow)
        self.zeta = float(zeta)
        self.mbar_cap = int(mbar_cap)
        self.strict = strict

        self.iota: int | None = None
        self.sizes: list[int] = []          # |D_j| finalized at boundary j+1
        self._mbar_seen: int | None = None
        self.working: set[int] = set()
        self.new_uids: list[int] = []
        self.usable: set[int] | None = None  # None -> every leaf (bootstrap)
        self.pending_down: dict[int, tuple[tuple[int, ...], float]] = {}
        self.window_bounds: dict[int, float] = {}
        self.cloud_known: set[int] = set()
        self._uplink: list[tuple[float, int, TransferJob]] = []
        self._downlink: list[tuple[float, int, TransferJob]] = []
        self._seq = 0
        self._split_cursor = 0
        self.late_transfers = 0
        self.version = 0
        self.events: list[str] = []
        self.last_boundary = 0

    # ------------------------------------------------------------------
    # bookkeeping helpers
    # ------------------------------------------------------------------

    def _trace(self, t: float, proc: str, event: str, **kv):
        extra = " ".join(f"{k}={v}" for k, v in kv.items())
        self.events.append(f"t={t:.6f} proc={proc} event={event}" + (" " + extra if extra else ""))

    def _sync_structure(self):
        log = self.tree.split_log
        while self._split_cursor < len(log):
            parent, left, right = log[self._split_cursor]
            self._split_cursor += 1
            if self.usable is not None and parent in self.usable:
                self.usable.discard(parent)
                self.usable.update((left, right))
            self.ledger.drop_leaf(parent)
            for child in (left, right):
                self.ledger.rebuild_leaf(child, self.tree.leaf(child).uids)
            self.version += 1

    def learning_active(self, tick: int) -> bool:
        if self.iota is None:
            return True
        return tick <= self.iota * self.ticks_per_interval

    @property
    def mbar_now(self) -> int:
        if self._mbar_seen is None:
            return self.mbar_cap
        return min(self._mbar_seen, self.mbar_cap)

    @property
    def t_stop(self) -> float | None:
        return None if self.iota is None else self.iota * self.interval

    @property
    def resident(self) -> int:
        return self.ledger.resident

    def usable_for_predict(self) -> set[int] | None:
        """Leaf ids whose data is fully local; None means all leaves."""
        if self.usable is None:
            if not self.ledger.nonlocal_in_leaf:
                return None
            blocked = set(self.ledger.nonlocal_in_leaf)
            return {l for l in self.tree.leaves if l not in blocked}
        return {l for l in self.usable
                if self.ledger.nonlocal_in_leaf.get(l, 0) == 0}

    # ------------------------------------------------------------------
    # spec operations: one call per sampling tick and process
    # ------------------------------------------------------------------

    def cloud_step(self, tick: int):
        """Deliver uploads due by this tick and react to each of them."""
        t = tick * self.tau
        self._sync_structure()
        while self._uplink and self._uplink[0][0] <= t:
            _, _, job = heapq.heappop(self._uplink)
            self._complete_upload(job)

    def local_step(self, tick: int, new_uid: int | None = None):
        """Deliver downloads, store a new sample, run boundary actions."""
        t = tick * self.tau
        self._sync_structure()
        while self._downlink and self._downlink[0][0] <= t:
            _, _, job = heapq.heappop(self._downlink)
            self._complete_download(job)
        if new_uid is not None:
            if not self.learning_active(tick):
                raise SimulationFault("sample collected past the stop index")
            self.ledger.admit(new_uid, self.tree.pair_leaf[new_uid])
            self.new_uids.append(new_uid)
        if tick > 0 and tick % self.ticks_per_interval == 0:
            self._boundary(tick // self.ticks_per_interval, t)

    # ------------------------------------------------------------------
    # internals
    # ------------------------------------------------------------------

    def _complete_upload(self, job: TransferJob):
        for uid in job.moved:
            self.ledger.transition(uid, Custody.CLOUD, self.tree.pair_leaf[uid])
        self.cloud_known.update(job.payload)
        self._trace(job.completion, "cloud", "receive_upload",
                    window=job.window, size=job.size)
        self.version += 1
        self._cloud_reaction(job)

    def _cloud_reaction(self, job: TransferJob):
        """ActiveModels for the window after next, then send its data."""
        target = job.window + 2
        t1 = target * self.interval
        t2 = t1 + self.interval
        window = WindowSpec(t1, t2, self.subwindow, self.n_samples, self.zeta)
        ids = active_models(self.tree, window, self.ref_fn, self.lip_ref,
                            self.theta_fn, self.rng)
        xi_hi = compute_xi(self.zeta, self.subwindow, self.lip_ref,
                           max(self.theta_fn(t1), self.theta_fn(t2)))
        bound = success_probability(
            self.tree.leaf_count, t1, t2, self.subwindow,
            estimate_r_min(self.tree, self.domain), self.zeta, xi_hi,
            self.n_samples, self.domain.dim,
        )
        self.window_bounds[target] = bound
        payload = tuple(sorted(
            uid for lid in ids for uid in self.tree.leaf(lid).uids
            if uid in self.cloud_known
        ))
        moved = tuple(uid for uid in payload
                      if self.ledger.loc[uid] == Custody.CLOUD)
        dispatch, done = self.channel.schedule(job.completion, len(payload))
        for uid in moved:
            self.ledger.transition(uid, Custody.DOWNLOADING,
                                   self.tree.pair_leaf[uid])
        down = TransferJob("down", target, len(payload), dispatch, done,
                           payload, moved)
        self._seq += 1
        heapq.heappush(self._downlink, (done, self._seq, down))
        self.pending_down[target] = (tuple(ids), done)
        self._trace(job.completion, "cloud", "active_models", window=target,
                    leaves=len(ids), bound=f"{bound:.6f}")
        self._trace(dispatch, "cloud", "dispatch_download", window=target,
                    size=len(payload), move=len(moved))

    def _complete_download(self, job: TransferJob):
        for uid in job.moved:
            self.ledger.transition(uid, Custody.LOCAL, self.tree.pair_leaf[uid])
        self._trace(job.completion, "local", "receive_download",
                    window=job.window, size=job.size)
        self.version += 1

    def _boundary(self, j: int, t: float):
        if j <= self.last_boundary:
            return
        self.last_boundary = j
        self._trace(t, "local", "boundary", j=j)

        # finalize D_{j-1} = previous working set plus the interval's samples
        payload = sorted(self.working | set(self.new_uids))
        size = len(payload)
        self.sizes.append(size)
        if len(self.sizes) > self.q:
            growth = self.sizes[-1] - self.sizes[-1 - self.q]
            self._mbar_seen = max(self._mbar_seen or 0, growth, 0)
        if self.iota is None and size > self.mem_cap / 2.0 - self.mbar_now:
            self.iota = (j - 1) + self.q
            self._trace(t, "local", "learning_stop", iota=self.iota,
                        t_stop=f"{self.t_stop:.6f}")

        # rotate the usable leaf set for window j
        entry = self.pending_down.get(j)
        if entry is not None and entry[1] <= t:
            self.usable = self.tree.resolve_leaves(entry[0])
        else:
            if j >= 2:
                self.late_transfers += 1
                self._trace(t, "local", "late_transfer", window=j)
            self.usable = None

        # new working set: local pairs living in usable leaves
        if self.usable is None:
            working = {uid for uid, c in self.ledger.loc.items()
                       if c == Custody.LOCAL}
        else:
            working = set()
            for lid in self.usable:
                for uid in self.tree.leaf(lid).uids:
                    if self.ledger.loc.get(uid) == Custody.LOCAL:
                        working.add(int(uid))

        moved = tuple(uid for uid in payload if uid not in working)
        dispatch, done = self.channel.schedule(t, size)
        for uid in moved:
            self.ledger.transition(uid, Custody.UPLOADING,
                                   self.tree.pair_leaf[uid])
        up = TransferJob("up", j - 1, size, dispatch, done,
                         tuple(payload), moved)
        self._seq += 1
        heapq.heappush(self._uplink, (done, self._seq, up))
        self._trace(dispatch, "local", "dispatch_upload", window=j - 1,
                    size=size, move=len(moved))

        self.working = working
        self.new_uids = []
        self.version += 1
        self.audit()

    # ------------------------------------------------------------------
    # audits
    # ------------------------------------------------------------------

    def audit(self) -> dict:
        """Conservation and consistency check over all custody tags."""
        counts = [0, 0, 0, 0]
        for c in self.ledger.loc.values():
            counts[c] += 1
        if counts != self.ledger.counts:
            raise SimulationFault("custody counters out of sync")
        if len(self.ledger.loc) != self.tree.total_pairs:
            raise SimulationFault(
                f"conservation broken: {len(self.ledger.loc)} tagged pairs "
                f"vs {self.tree.total_pairs} accepted"
            )
        return {
            "local": counts[Custody.LOCAL],
            "uploading": counts[Custody.UPLOADING],
            "downloading": counts[Custody.DOWNLOADING],
            "cloud": counts[Custody.CLOUD],
            "resident": self.resident,
            "faults": self.ledger.faults,
            "late_transfers": self.late_transfers,
        }
