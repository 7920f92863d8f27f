"""Run traces, cost metrics, and their CSV serialization.

Counters follow the elementary-operation model: count_active is every
link update a worker performed (local diffusion plus exchange entries it
sent, received, or migrated), count_idle is every granted operation slot
it could not use.  Normalizing by the link count L makes runs of
different sizes comparable: cost 1.0 means "one pass over all links".
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

__all__ = [
    "PidRecord",
    "Trace",
    "TraceRecord",
    "idle_proportion",
    "normalized_iterations",
    "read_summary_csv",
    "read_trace_csv",
    "slowest_pid_time",
    "write_csv",
]


@dataclass(frozen=True, slots=True)
class PidRecord:
    """One worker's state at a step boundary (counters are cumulative)."""

    residual: float
    outbound: float
    slope: float
    set_size: int
    count_active: int
    count_idle: int
    active: bool


@dataclass(frozen=True, slots=True)
class TraceRecord:
    step: int
    pids: tuple[PidRecord, ...]
    global_residual: float
    global_bound: float


@dataclass
class Trace:
    """Per-step records plus run-level outcome metadata."""

    n: int
    l: int
    k: int
    partition: str
    dynamic: bool
    target_error: float
    epsilon: float
    pid_speed: list[int]
    records: list[TraceRecord] = field(default_factory=list)
    steps: int = 0
    converged: bool = False
    final_count_active: list[int] = field(default_factory=list)
    final_count_idle: list[int] = field(default_factory=list)


def normalized_iterations(count_active: int, count_idle: int, l: int) -> float:
    """(active + idle) operations divided by the link count."""
    if l <= 0:
        raise ValueError(f"link count must be positive, got {l}")
    return (count_active + count_idle) / l


def slowest_pid_time(trace: Trace) -> float:
    """Normalized completion time: max over workers at the final step."""
    if not trace.converged:
        raise ValueError("run did not converge; completion time undefined")
    if not trace.final_count_active:
        return 0.0
    return max(normalized_iterations(a, i, trace.l)
               for a, i in zip(trace.final_count_active, trace.final_count_idle))


def idle_proportion(trace: Trace) -> float:
    """Fraction of granted operation slots wasted idle, over the whole run."""
    total_active = sum(trace.final_count_active)
    total_idle = sum(trace.final_count_idle)
    if total_active + total_idle <= 0:
        raise ValueError("no operations recorded; idle proportion undefined")
    return total_idle / (total_active + total_idle)


def _fmt(v) -> str:
    # repr keeps float fields lossless (shortest round-trip form)
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(trace: Trace, trace_path: str, summary_path: str,
              convergence_path: str) -> list[str]:
    """Emit the per-step trace, one-row summary, and convergence curve.

    An empty trace still produces files with header rows.  Returns the
    written paths.
    """
    with open(trace_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,pid,r_k,s_k,slope_k,set_size,count_active,count_idle,active\n")
        for rec in trace.records:
            for pid, p in enumerate(rec.pids):
                fh.write(f"{rec.step},{pid},{_fmt(p.residual)},{_fmt(p.outbound)},"
                         f"{_fmt(p.slope)},{p.set_size},{p.count_active},"
                         f"{p.count_idle},{int(p.active)}\n")

    ran = (trace.converged or trace.steps > 0 or bool(trace.records)
           or bool(trace.final_count_active))
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("n,l,k,partition,dynamic,target_error,"
                 "normalized_iterations_slowest,idle_proportion,steps\n")
        if ran:
            slowest = slowest_pid_time(trace) if trace.converged else math.nan
            try:
                idle = idle_proportion(trace)
            except ValueError:
                idle = math.nan
            fh.write(f"{trace.n},{trace.l},{trace.k},{trace.partition},"
                     f"{str(trace.dynamic).lower()},{_fmt(trace.target_error)},"
                     f"{_fmt(slowest)},{_fmt(idle)},{trace.steps}\n")

    with open(convergence_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step_normalized_iterations,log10_global_bound\n")
        for rec in trace.records:
            t = max(normalized_iterations(p.count_active, p.count_idle, trace.l)
                    for p in rec.pids)
            bound = math.log10(rec.global_bound) if rec.global_bound > 0.0 else -math.inf
            fh.write(f"{_fmt(t)},{_fmt(bound)}\n")

    return [trace_path, summary_path, convergence_path]


_TRACE_TYPES = {"step": int, "pid": int, "r_k": float, "s_k": float,
                "slope_k": float, "set_size": int, "count_active": int,
                "count_idle": int, "active": lambda v: bool(int(v))}


def read_trace_csv(path: str) -> list[dict]:
    """Parse a trace CSV back into typed row dicts (exact round trip)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: _TRACE_TYPES[k](v) for k, v in row.items()} for row in reader]


def read_summary_csv(path: str) -> list[dict]:
    types = {"n": int, "l": int, "k": int, "partition": str,
             "dynamic": lambda v: v == "true", "target_error": float,
             "normalized_iterations_slowest": float,
             "idle_proportion": float, "steps": int}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: types[k](v) for k, v in row.items()} for row in reader]
