"""Time-stepped simulation of partitioned diffusion over K virtual workers.

Each step, every worker (PID, in index order) refreshes its pending-fluid
measures, decides whether it is worth staying active, possibly drains its
outbound buffer into exchange messages, then spends its per-step operation
budget on local diffusions.  Messages are delivered at the end of the step
(configurable delay), and an optional controller migrates nodes from the
slowest worker to the fastest one based on smoothed convergence slopes.

Cost model: every link update costs one operation, whether it happens
during a local diffusion, when an exchange entry is drained or delivered,
or when a node migrates (charged to both sides).  Charges beyond the
per-step budget are carried as debt against future steps, so one column
or one drain is never split.  Idle workers burn their budget into
count_idle; that is what the slowest-PID time metric measures.

Everything is deterministic: same system + config = bit-identical trace.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (ConvergenceError, FluidState, SelectorState, diffuse,
                   init_state, make_selector, select_next, selection_weights)
from .graph import LinearSystem
from .metrics import PidRecord, Trace, TraceRecord
from .partition import (PartitionAssignment, SlopeTracker, apply_move,
                        cb_partition, plan_reaffectation, uniform_partition,
                        update_slope)

logger = logging.getLogger(__name__)

__all__ = ["ExchangeMessage", "PidState", "SimConfig", "Simulation", "run"]

PARTITION_SCHEMES = ("uniform", "cb")


@dataclass
class SimConfig:
    """Knobs for one simulated run.

    pid_speed is operations per worker per step (default n//k, at least 1);
    a list gives heterogeneous speeds.  epsilon defaults to the system's
    contraction margin.  gamma is the selector threshold decay, eta the
    slope smoothing factor, z the post-move cooldown in steps.
    record_every thins trace retention for very long runs (summary
    counters are exact regardless).
    """

    k: int
    target_error: float
    pid_speed: int | list[int] | None = None
    epsilon: float | None = None
    gamma: float = 1.2
    eta: float = 0.5
    z: int = 10
    weight_scheme: str = "inv_out"
    partition: str = "uniform"
    dynamic: bool = False
    message_delay: int = 0
    max_steps: int = 100_000
    record_every: int = 1
    exchange_after_diffusion: bool = False  # step-order experiment knob
    seed: int = 0


@dataclass
class PidState:
    """One worker: its owned nodes and bookkeeping.

    `nodes` aliases the assignment's set list (kept in order, migrations
    append at the tail); marginal vectors are views into the engine's
    global arrays, e.g. sim.state.fluid[pid.nodes_arr].  out_buffer
    accumulates fluid per external destination node since the last drain;
    `outbound` is its L1 mass, `residual` the L1 fluid on owned nodes.
    Counters are cumulative; debt is budget already consumed from future
    steps (atomic columns, drains, deliveries, migrations).
    """

    index: int
    nodes: list[int]
    nodes_arr: np.ndarray
    member: np.ndarray
    selector: SelectorState
    out_buffer: dict[int, float] = field(default_factory=dict)
    residual: float = 0.0
    outbound: float = 0.0
    active: bool = True
    count_active: int = 0
    count_idle: int = 0
    debt: int = 0


@dataclass(frozen=True)
class ExchangeMessage:
    """Drained fluid from one worker to another: parallel node/amount arrays."""

    from_pid: int
    to_pid: int
    nodes: np.ndarray
    amounts: np.ndarray


class Simulation:
    """Stepping engine; use run() for the whole loop or step() to inspect.

    White-box surface for tests: state (global FluidState), history
    baseline h_old, owner array, pids list, message queue, and the
    slope tracker (dynamic runs).
    """

    def __init__(self, sys: LinearSystem, cfg: SimConfig):
        g = sys.graph
        n = g.n
        if not (1 <= cfg.k <= n):
            raise ValueError(f"k={cfg.k} outside [1, {n}]")
        if not (cfg.target_error > 0.0):
            raise ValueError(f"target_error must be positive, got {cfg.target_error}")
        if cfg.partition not in PARTITION_SCHEMES:
            raise ValueError(f"unknown partition scheme {cfg.partition!r}")
        if cfg.message_delay < 0:
            raise ValueError(f"message_delay must be non-negative, got {cfg.message_delay}")
        if cfg.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {cfg.max_steps}")
        if cfg.record_every < 1:
            raise ValueError(f"record_every must be positive, got {cfg.record_every}")
        self.sys = sys
        self.cfg = cfg
        self.epsilon = sys.epsilon if cfg.epsilon is None else cfg.epsilon
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")

        if cfg.pid_speed is None:
            self.speeds = [max(1, n // cfg.k)] * cfg.k
        elif isinstance(cfg.pid_speed, int):
            self.speeds = [cfg.pid_speed] * cfg.k
        else:
            self.speeds = list(cfg.pid_speed)
        if len(self.speeds) != cfg.k or any(s < 1 for s in self.speeds):
            raise ValueError(f"pid_speed must give {cfg.k} positive budgets")

        if cfg.partition == "uniform":
            self.assign = uniform_partition(n, cfg.k)
        else:
            self.assign = cb_partition(g.out_deg, cfg.k)
        self.owner = self.assign.owner

        self.state = init_state(sys)
        self.h_old = np.zeros(n)
        weights = selection_weights(g, cfg.weight_scheme)
        self.pids: list[PidState] = []
        for idx, nodes in enumerate(self.assign.sets):
            arr = np.asarray(nodes, dtype=np.int64)
            member = np.zeros(n, dtype=bool)
            member[arr] = True
            sel = make_selector(weights, sys.b, arr, decay=cfg.gamma,
                                scheme=cfg.weight_scheme)
            self.pids.append(PidState(index=idx, nodes=nodes, nodes_arr=arr,
                                      member=member, selector=sel))
        self.tracker = (SlopeTracker.create(cfg.k, cfg.eta, cfg.z, cfg.target_error)
                        if cfg.dynamic and cfg.k >= 2 else None)
        self.idle_floor = cfg.target_error * self.epsilon / cfg.k / 10.0

        self.s_total = 0.0       # sum of outbound masses (incremental)
        self.inflight = 0.0      # mass inside queued messages (incremental)
        self.queue: list[tuple[int, list[ExchangeMessage]]] = []
        self.steps = 0
        self.converged = False
        self._finished = False
        self.trace = Trace(n=n, l=g.l, k=cfg.k, partition=cfg.partition,
                           dynamic=cfg.dynamic, target_error=cfg.target_error,
                           epsilon=self.epsilon, pid_speed=list(self.speeds))
        for pid in self.pids:
            self._refresh(pid)

    # -- pending-fluid bookkeeping ------------------------------------

    def _refresh(self, pid: PidState) -> None:
        """Exact recomputation of a worker's residual and outbound mass."""
        pid.residual = float(np.abs(self.state.fluid[pid.nodes_arr]).sum())
        buf = pid.out_buffer
        if buf:
            vals = np.fromiter(buf.values(), np.float64, len(buf))
            new_s = float(np.abs(vals).sum())
        else:
            new_s = 0.0
        self.s_total += new_s - pid.outbound
        pid.outbound = new_s

    def _at_target(self) -> bool:
        """Global stop test; the decision is confirmed on exact values."""
        if self.state.residual + self.s_total + self.inflight <= self.cfg.target_error:
            self.state.recompute()
            s = 0.0
            for pid in self.pids:
                buf = pid.out_buffer
                if buf:
                    vals = np.fromiter(buf.values(), np.float64, len(buf))
                    s += float(np.abs(vals).sum())
            self.s_total = s
            fl = 0.0
            for _, msgs in self.queue:
                for m in msgs:
                    fl += float(np.abs(m.amounts).sum())
            self.inflight = fl
            return (self.state.residual + self.s_total + self.inflight
                    <= self.cfg.target_error)
        return False

    # -- spec step phases ----------------------------------------------

    def idle_check(self, pid: PidState) -> bool:
        """Worth staying active?  False when the local residual is dwarfed
        by the pending transmission or by the per-worker share of the
        target."""
        return not (pid.residual < max(pid.outbound / 10.0, self.idle_floor))

    def exchange_check_and_send(self, pid: PidState) -> list[ExchangeMessage]:
        """Drain the buffer when pending mass passed half the local residual."""
        if pid.out_buffer and pid.outbound > pid.residual / 2.0:
            return self._drain(pid)
        return []

    def _drain(self, pid: PidState) -> list[ExchangeMessage]:
        """Turn the buffer into per-destination messages; reset the history
        baseline so the outbound measure restarts from zero.  Charges one
        operation per drained entry."""
        msgs: list[ExchangeMessage] = []
        buf = pid.out_buffer
        if buf:
            nodes = np.fromiter(buf.keys(), np.int64, len(buf))
            amounts = np.fromiter(buf.values(), np.float64, len(buf))
            owners = self.owner[nodes]
            order = np.argsort(owners, kind="stable")
            nodes, amounts, owners = nodes[order], amounts[order], owners[order]
            cuts = (np.nonzero(np.diff(owners))[0] + 1).tolist()
            for a, b in zip([0, *cuts], [*cuts, len(nodes)]):
                msgs.append(ExchangeMessage(from_pid=pid.index,
                                            to_pid=int(owners[a]),
                                            nodes=nodes[a:b],
                                            amounts=amounts[a:b]))
            entries = len(nodes)
            pid.count_active += entries
            pid.debt += entries
            self.inflight += float(np.abs(amounts).sum())
            buf.clear()
        self.s_total -= pid.outbound
        pid.outbound = 0.0
        arr = pid.nodes_arr
        self.h_old[arr] = self.state.history[arr]
        return msgs

    def _buffer_external(self, pid: PidState, dests: np.ndarray,
                         amounts: np.ndarray) -> None:
        buf = pid.out_buffer
        ds = 0.0
        for j, a in zip(dests.tolist(), amounts.tolist()):
            old = buf.get(j, 0.0)
            new = old + a
            buf[j] = new
            ds += abs(new) - abs(old)
        pid.outbound += ds
        self.s_total += ds

    def pid_step(self, pid: PidState, budget: int) -> int:
        """Spend `budget` operations on local diffusions; returns link ops
        performed.  Idle workers burn the whole budget; a drained set burns
        the remainder.  The last column may overdraw into debt."""
        if not pid.active:
            pid.count_idle += budget
            return 0
        left = budget
        done = 0
        fluid = self.state.fluid
        while left > 0:
            if self._at_target():
                self.converged = True
                break
            node = select_next(pid.selector, fluid, pid.nodes_arr)
            if node is None:
                pid.count_idle += left
                left = 0
                break
            receipt = diffuse(self.state, self.sys, node, pid.member)
            cost = receipt.local_ops
            pid.count_active += cost
            pid.residual += receipt.residual_delta
            done += cost
            left -= cost
            ext = receipt.external
            if ext is not None and ext[0].size:
                self._buffer_external(pid, ext[0], ext[1])
        if left < 0:
            pid.debt += -left
        return done

    def deliver(self, msg: ExchangeMessage) -> None:
        """Apply a message's fluid at its destination worker(s).

        Entries are grouped by current owner (a migration may have
        reassigned nodes while the message was in flight).  Each group
        charges one operation per entry to its receiver, wakes it, and
        re-seeds its selector threshold from the received mass.
        """
        owners = self.owner[msg.nodes]
        if np.all(owners == owners[0]):
            self._deliver_group(int(owners[0]), msg.nodes, msg.amounts)
            return
        order = np.argsort(owners, kind="stable")
        nodes, amounts, owners = msg.nodes[order], msg.amounts[order], owners[order]
        cuts = (np.nonzero(np.diff(owners))[0] + 1).tolist()
        for a, b in zip([0, *cuts], [*cuts, len(nodes)]):
            self._deliver_group(int(owners[a]), nodes[a:b], amounts[a:b])

    def _deliver_group(self, owner_idx: int, nodes: np.ndarray,
                       amounts: np.ndarray) -> None:
        dst = self.pids[owner_idx]
        if not np.all(dst.member[nodes]):
            raise RuntimeError(f"delivery to nodes not owned by pid {owner_idx}")
        received = float(np.abs(amounts).sum())
        self.inflight -= received
        fluid = self.state.fluid
        old = fluid[nodes]
        new = old + amounts
        fluid[nodes] = new
        dr = float(np.abs(new).sum() - np.abs(old).sum())
        self.state.residual += dr
        if received > 0.0:
            sel = dst.selector
            r0 = dst.residual
            sel.threshold = (min(sel.threshold * (r0 + received) / r0, received)
                             if r0 > 0.0 else received)
        dst.residual += dr
        dst.count_active += len(nodes)
        dst.debt += len(nodes)
        dst.active = True

    def _deliver_due(self) -> None:
        while self.queue and self.queue[0][0] <= self.steps:
            _, msgs = self.queue.pop(0)
            for m in msgs:
                self.deliver(m)
        if not self.queue:
            self.inflight = 0.0  # erase float drift once nothing is pending

    def apply_migration(self, src: PidState, dst: PidState,
                        moved: list[int]) -> None:
        """Hand `moved` (already reassigned in the owner lookup) from src
        to dst: flip the membership structures, transfer the nodes' fluid
        mass between the residual accounts, then flush both buffers with
        immediate delivery so every pending-mass measure restarts from a
        clean baseline.  Both sides are charged one operation per node."""
        arr = np.asarray(moved, dtype=np.int64)
        src.member[arr] = False
        dst.member[arr] = True
        src.nodes_arr = np.asarray(src.nodes, dtype=np.int64)
        dst.nodes_arr = np.asarray(dst.nodes, dtype=np.int64)
        dr = float(np.abs(self.state.fluid[arr]).sum())
        src.residual -= dr
        dst.residual += dr
        # flush deliveries route by the new ownership; entries aimed at the
        # moved nodes land on (and are charged to) their new owner
        for m in self._drain(src):
            self.deliver(m)
        for m in self._drain(dst):
            self.deliver(m)
        self.h_old[arr] = self.state.history[arr]
        count = len(moved)
        src.count_active += count
        src.debt += count
        dst.count_active += count
        dst.debt += count
        src.selector.cursor = 0
        dst.selector.cursor = 0

    def _controller(self) -> None:
        """End-of-step slope update and at most one migration."""
        for pid in self.pids:
            self._refresh(pid)
        if self.tracker is None:
            return
        for pid in self.pids:
            update_slope(self.tracker, pid.index, pid.residual, pid.outbound)
        plan = plan_reaffectation(self.tracker, [len(p.nodes) for p in self.pids])
        armed: tuple[int, int] | None = None
        if plan is not None:
            moved = apply_move(self.assign, plan)
            self.apply_migration(self.pids[plan.from_idx],
                                 self.pids[plan.to_idx], moved)
            armed = (plan.from_idx, plan.to_idx)
            for pid in self.pids:
                self._refresh(pid)
        # cooldowns tick once per step; the pair armed this step keeps its
        # full value so a move blocks the next z steps exactly
        cd = self.tracker.cooldown
        tick = cd > 0
        if armed is not None:
            tick[list(armed)] = False
        cd[tick] -= 1

    def _record(self) -> None:
        if self.cfg.record_every != 1 and not self.converged \
                and self.steps % self.cfg.record_every != 0:
            return
        slopes = self.tracker.slope if self.tracker is not None else None
        recs = tuple(PidRecord(residual=p.residual, outbound=p.outbound,
                               slope=float(slopes[p.index]) if slopes is not None else 0.0,
                               set_size=len(p.nodes),
                               count_active=p.count_active,
                               count_idle=p.count_idle,
                               active=p.active)
                     for p in self.pids)
        gr = (sum(p.residual for p in self.pids)
              + sum(p.outbound for p in self.pids) + self.inflight)
        self.trace.records.append(TraceRecord(step=self.steps, pids=recs,
                                              global_residual=gr,
                                              global_bound=gr / self.epsilon))

    def step(self) -> None:
        """One full time step (all phases, all workers)."""
        self.steps += 1
        for pid in self.pids:
            self._refresh(pid)
            pid.active = self.idle_check(pid)
            if not self.cfg.exchange_after_diffusion:
                msgs = self.exchange_check_and_send(pid)
                if msgs:
                    self.queue.append((self.steps + self.cfg.message_delay, msgs))
            grant = self.speeds[pid.index]
            repay = min(pid.debt, grant)
            pid.debt -= repay
            budget = grant - repay
            if budget > 0:
                self.pid_step(pid, budget)
            if self.cfg.exchange_after_diffusion:
                msgs = self.exchange_check_and_send(pid)
                if msgs:
                    self.queue.append((self.steps + self.cfg.message_delay, msgs))
            if self.converged:
                break
        if not self.converged:
            self._deliver_due()
            self._controller()
        else:
            for pid in self.pids:
                self._refresh(pid)
        self._record()
        if not self.converged and self._at_target():
            self.converged = True

    def _finalize(self) -> Trace:
        self.trace.steps = self.steps
        self.trace.converged = self.converged
        self.trace.final_count_active = [p.count_active for p in self.pids]
        self.trace.final_count_idle = [p.count_idle for p in self.pids]
        self._finished = True
        return self.trace

    def run(self) -> Trace:
        """Step until the global pending mass reaches the target.

        Raises ConvergenceError (carrying the partial trace) if max_steps
        is hit first.
        """
        if self._finished:
            return self.trace
        if self._at_target():
            self.converged = True
            return self._finalize()
        while not self.converged:
            if self.steps >= self.cfg.max_steps:
                trace = self._finalize()
                gr = (self.state.residual + self.s_total + self.inflight)
                raise ConvergenceError(
                    f"no convergence within {self.cfg.max_steps} steps "
                    f"(pending mass {gr!r}, target {self.cfg.target_error!r})",
                    residual=gr, trace=trace)
            self.step()
        return self._finalize()


def run(sys: LinearSystem, cfg: SimConfig) -> Trace:
    """Simulate one configured run to convergence and return its trace."""
    return Simulation(sys, cfg).run()
