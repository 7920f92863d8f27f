"""diffusim: residual-fluid diffusion solver for X = P.X + B, plus a
deterministic time-stepped simulator of its execution over K partitioned
virtual workers (static or slope-adaptive partitions)."""

from .core import (ConvergenceError, FluidState, diffuse, error_bound,
                   init_state, make_selector, select_next, selection_weights,
                   solve_sequential)
from .graph import (ColumnGraph, LinearSystem, build_pagerank_system,
                    load_edge_list, reorder_nodes, stats, synth_power_law,
                    write_edge_list)
from .metrics import (Trace, TraceRecord, idle_proportion,
                      normalized_iterations, slowest_pid_time, write_csv)
from .partition import (PartitionAssignment, apply_move, cb_partition,
                        plan_reaffectation, uniform_partition)
from .simulator import SimConfig, Simulation, run

__version__ = "0.1.0"

__all__ = [
    "ColumnGraph", "ConvergenceError", "FluidState", "LinearSystem",
    "PartitionAssignment", "SimConfig", "Simulation", "Trace", "TraceRecord",
    "apply_move", "build_pagerank_system", "cb_partition", "diffuse",
    "error_bound", "idle_proportion", "init_state", "load_edge_list",
    "make_selector", "normalized_iterations", "plan_reaffectation",
    "reorder_nodes", "run", "select_next", "selection_weights",
    "slowest_pid_time", "solve_sequential", "stats", "synth_power_law",
    "uniform_partition", "write_csv", "write_edge_list",
]
