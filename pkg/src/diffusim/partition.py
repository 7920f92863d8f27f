"""Node-set partitioning and the slope-driven rebalancing controller.

A PartitionAssignment maps every node to one of k ordered, disjoint,
non-empty sets.  Static constructors cut the node range into contiguous
blocks (uniformly, or balancing out-degree mass); the dynamic controller
watches per-set convergence slopes and migrates tail nodes from the
slowest set to the fastest one, with a cooldown between moves of the
same set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "MovePlan",
    "PartitionAssignment",
    "SlopeTracker",
    "apply_move",
    "cb_partition",
    "plan_reaffectation",
    "uniform_partition",
    "update_slope",
]

# a move triggers when the slow set's smoothed residual exponent lags the
# fast set's by more than a factor 2, i.e. log10(0.5)
TRIGGER_GAP = math.log10(0.5)
MOVE_FRACTION_CAP = 0.1


@dataclass
class PartitionAssignment:
    """k ordered node lists covering range(n) disjointly, plus the inverse
    owner lookup.  Sets keep insertion order; migrated nodes append at the
    tail of their new set."""

    sets: list[list[int]]
    owner: np.ndarray  # int64, owner[node] = set index

    @property
    def k(self) -> int:
        return len(self.sets)

    @property
    def n(self) -> int:
        return int(self.owner.size)

    def validate(self) -> None:
        seen = np.full(self.n, -1, dtype=np.int64)
        for idx, nodes in enumerate(self.sets):
            if not nodes:
                raise ValueError(f"set {idx} is empty")
            arr = np.asarray(nodes)
            if np.any(seen[arr] != -1):
                raise ValueError(f"set {idx} overlaps another set")
            seen[arr] = idx
        if np.any(seen == -1):
            raise ValueError("assignment does not cover all nodes")
        if not np.array_equal(seen, self.owner):
            raise ValueError("owner array inconsistent with sets")


def _from_boundaries(n: int, bounds: list[int]) -> PartitionAssignment:
    sets = [list(range(a, b)) for a, b in zip(bounds[:-1], bounds[1:])]
    owner = np.empty(n, dtype=np.int64)
    for idx, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        owner[a:b] = idx
    return PartitionAssignment(sets=sets, owner=owner)


def _check_kn(n: int, k: int) -> None:
    if k < 1:
        raise ValueError(f"need at least one set, got k={k}")
    if k > n:
        raise ValueError(f"cannot split {n} nodes into {k} non-empty sets")


def uniform_partition(n: int, k: int) -> PartitionAssignment:
    """Contiguous blocks of size n//k, remainder spread over the first sets."""
    _check_kn(n, k)
    base, rem = divmod(n, k)
    bounds = [0]
    for i in range(k):
        bounds.append(bounds[-1] + base + (1 if i < rem else 0))
    return _from_boundaries(n, bounds)


def cb_partition(out_deg: np.ndarray, k: int) -> PartitionAssignment:
    """Contiguous blocks with near-equal out-degree mass.

    Block m ends at the first node where the cumulative out-degree reaches
    (m+1)*L/k (compared in exact integer arithmetic), so every non-final
    block's mass sits within max(out_deg) of L/k.  If the mass runs out
    early, trailing blocks still get one node each from the tail.
    """
    out_deg = np.asarray(out_deg, dtype=np.int64)
    n = int(out_deg.size)
    _check_kn(n, k)
    total = int(out_deg.sum())
    if total == 0:
        return uniform_partition(n, k)  # no mass to balance
    scaled = np.cumsum(out_deg) * k  # compare k*cum >= (m+1)*L exactly
    bounds = [0]
    for m in range(k - 1):
        cut = int(np.searchsorted(scaled, (m + 1) * total, side="left")) + 1
        cut = max(cut, bounds[-1] + 1)       # at least one node per block
        cut = min(cut, n - (k - m - 1))      # leave one node per later block
        bounds.append(cut)
    bounds.append(n)
    return _from_boundaries(n, bounds)


@dataclass
class SlopeTracker:
    """Smoothed per-set convergence exponents plus per-set move cooldowns.

    slope[i] tracks an exponentially smoothed -log10 of set i's pending
    fluid; a larger slope means the set is further converged.  eps_floor
    keeps the log argument positive once a set is fully drained.
    """

    slope: np.ndarray
    cooldown: np.ndarray
    smoothing: float
    eps_floor: float
    cooldown_steps: int

    @classmethod
    def create(cls, k: int, smoothing: float, cooldown_steps: int,
               target_error: float) -> "SlopeTracker":
        if not (0.0 < smoothing <= 1.0):
            raise ValueError(f"smoothing must be in (0, 1], got {smoothing}")
        if cooldown_steps < 0:
            raise ValueError(f"cooldown_steps must be non-negative, got {cooldown_steps}")
        return cls(slope=np.zeros(k), cooldown=np.zeros(k, dtype=np.int64),
                   smoothing=smoothing, eps_floor=target_error / k / 1000.0,
                   cooldown_steps=cooldown_steps)


def update_slope(tracker: SlopeTracker, idx: int, residual: float,
                 outbound: float) -> float:
    """Fold one step's pending fluid into set idx's smoothed exponent."""
    eta = tracker.smoothing
    val = tracker.slope[idx] * (1.0 - eta) \
        - math.log10(residual + outbound + tracker.eps_floor) * eta
    tracker.slope[idx] = val
    return float(val)


@dataclass(frozen=True)
class MovePlan:
    """Move `count` tail nodes of set from_idx to set to_idx."""

    from_idx: int
    to_idx: int
    count: int


def plan_reaffectation(tracker: SlopeTracker,
                       set_sizes: list[int]) -> MovePlan | None:
    """At most one move per step: slowest set sheds nodes to the fastest.

    Triggers when the extreme slopes differ by more than the factor-2 gap
    and neither endpoint is cooling down; moves at most 10% of the slow
    set (at least 1 node, never emptying it) and arms both cooldowns.
    Ties on slope resolve to the lowest set index.
    """
    k = len(set_sizes)
    if k < 2:
        return None
    i_max = int(np.argmax(tracker.slope))
    i_min = int(np.argmin(tracker.slope))
    if i_max == i_min:
        return None
    if tracker.slope[i_min] >= tracker.slope[i_max] + TRIGGER_GAP:
        return None
    if tracker.cooldown[i_min] > 0 or tracker.cooldown[i_max] > 0:
        return None
    size = set_sizes[i_min]
    if size < 2:
        return None  # never empty a set
    denom = tracker.slope[i_max] + 1.0
    ratio = (tracker.slope[i_min] + 1.0) / denom if denom > 0.0 else 0.0
    ratio = min(max(ratio, 0.0), MOVE_FRACTION_CAP)
    count = max(1, math.floor(size * ratio))
    count = min(count, size - 1)
    tracker.cooldown[i_min] = tracker.cooldown_steps
    tracker.cooldown[i_max] = tracker.cooldown_steps
    return MovePlan(from_idx=i_min, to_idx=i_max, count=count)


def apply_move(assign: PartitionAssignment, plan: MovePlan) -> list[int]:
    """Detach the plan's tail nodes from the source set, append them to the
    destination set, update the owner lookup, and return the moved ids."""
    src = assign.sets[plan.from_idx]
    if not (0 < plan.count < len(src)):
        raise ValueError(f"move count {plan.count} out of range for set of {len(src)}")
    moved = src[-plan.count:]
    del src[-plan.count:]
    assign.sets[plan.to_idx].extend(moved)
    assign.owner[moved] = plan.to_idx
    return moved
