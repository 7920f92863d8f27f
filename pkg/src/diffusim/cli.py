"""Experiment runner: declarative sweeps over PID counts and partition variants.

A run config is a flat key=value file (# comments allowed).  Keys:

    source        synthetic | edge_list            (required)
    n             synthetic node count             (default 1000)
    alpha         power-law exponent               (default 1.5)
    seed          graph + run seed                 (default 0)
    ordering      natural | random | out_degree | in_degree  (default natural)
    path          edge list file (edge_list source)
    n_limit       node cap for edge_list source
    damping       PageRank damping d               (default 0.85)
    target_error  stop threshold                   (default 1/N)
    k_list        comma-separated PID counts       (required)
    variants      subset of unif_static,unif_dynamic,cb_static,cb_dynamic
                                                   (default all four)
    gamma         selector threshold decay         (default 1.2)
    eta           slope smoothing factor           (default 0.5)
    z             migration cooldown steps         (default 10)
    pid_speed     ops per PID per step             (default N/K)
    message_delay exchange delivery delay in steps (default 0)
    max_steps     per-cell step cap                (default 100000)
    record_every  trace retention thinning         (default 1)
    out_dir       output directory (flag/env win)

Every (k, variant) cell writes its own trace/summary/convergence CSVs and
one row in the experiment-level summary.csv.  A non-converging cell is
recorded with nan metrics and the run continues; the exit code is then
nonzero.  Same config + same seed reproduces every output byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys as _sys
from dataclasses import dataclass, field

from . import graph as graphmod
from .core import ConvergenceError
from .metrics import Trace, idle_proportion, slowest_pid_time, write_csv
from .simulator import SimConfig, run

logger = logging.getLogger(__name__)

__all__ = ["ConfigError", "ExperimentSpec", "main", "parse_config",
           "run_experiment"]

VARIANTS = ("unif_static", "unif_dynamic", "cb_static", "cb_dynamic")
ORDERINGS = ("natural", "random", "out_degree", "in_degree")
OUT_ENV = "DIFFUSIM_OUT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    """Parsed experiment grid; one simulator run per (k, variant) cell."""

    source: str
    k_list: list[int]
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    n: int = 1000
    alpha: float = 1.5
    seed: int = 0
    ordering: str = "natural"
    path: str | None = None
    n_limit: int | None = None
    damping: float = 0.85
    target_error: float | None = None  # None: 1/N once the graph is built
    gamma: float = 1.2
    eta: float = 0.5
    z: int = 10
    pid_speed: int | None = None
    message_delay: int = 0
    max_steps: int = 100_000
    record_every: int = 1
    out_dir: str | None = None


_INT_KEYS = {"n", "seed", "n_limit", "z", "pid_speed", "message_delay",
             "max_steps", "record_every"}
_FLOAT_KEYS = {"alpha", "damping", "target_error", "gamma", "eta"}
_STR_KEYS = {"source", "ordering", "path", "out_dir"}


def parse_config(path: str) -> ExperimentSpec:
    """Read a key=value config file into an ExperimentSpec.

    Unknown keys and missing required keys (source, k_list) are hard
    errors; value validation beyond typing happens in run_experiment
    where the graph size is known.
    """
    pairs: dict[str, str] = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in pairs:
                raise ConfigError(f"{path}:{ln}: duplicate key: {key}")
            pairs[key] = value

    known = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | {"k_list", "variants"}
    unknown = [k for k in pairs if k not in known]
    if unknown:
        label = "unknown key" if len(unknown) == 1 else "unknown keys"
        raise ConfigError(f"{label}: {', '.join(unknown)}")
    missing = [k for k in ("source", "k_list") if k not in pairs]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    kwargs: dict = {}
    try:
        for key, value in pairs.items():
            if key == "k_list":
                kwargs[key] = [int(v) for v in value.split(",") if v.strip()]
            elif key == "variants":
                kwargs[key] = [v.strip() for v in value.split(",") if v.strip()]
            elif key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc

    spec = ExperimentSpec(**kwargs)
    if spec.source not in ("synthetic", "edge_list"):
        raise ConfigError(f"source must be synthetic or edge_list, got {spec.source!r}")
    if spec.ordering not in ORDERINGS:
        raise ConfigError(f"ordering must be one of {', '.join(ORDERINGS)}")
    if not spec.k_list:
        raise ConfigError("k_list must not be empty")
    bad = [v for v in spec.variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants: {', '.join(bad)}; "
                          f"choose from {', '.join(VARIANTS)}")
    if not spec.variants:
        raise ConfigError("variants must not be empty")
    if spec.source == "edge_list":
        missing = [k for k, v in (("path", spec.path), ("n_limit", spec.n_limit))
                   if v is None]
        if missing:
            raise ConfigError(f"edge_list source needs: {', '.join(missing)}")
    return spec


def _build_graph(spec: ExperimentSpec, seed: int) -> graphmod.ColumnGraph:
    if spec.source == "synthetic":
        g = graphmod.synth_power_law(spec.n, spec.alpha, seed)
    else:
        g = graphmod.load_edge_list(spec.path, spec.n_limit)
    if spec.ordering == "random":
        g = graphmod.reorder_nodes(g, "random", seed=seed + 1)
    elif spec.ordering == "out_degree":
        g = graphmod.reorder_nodes(g, "out_degree_desc")
    elif spec.ordering == "in_degree":
        g = graphmod.reorder_nodes(g, "in_degree_desc")
    return g


def _variant_config(spec: ExperimentSpec, variant: str, k: int,
                    target: float, seed: int) -> SimConfig:
    prefix, _, mode = variant.partition("_")
    return SimConfig(k=k, target_error=target,
                     pid_speed=spec.pid_speed,
                     gamma=spec.gamma, eta=spec.eta, z=spec.z,
                     partition="uniform" if prefix == "unif" else "cb",
                     dynamic=(mode == "dynamic"),
                     message_delay=spec.message_delay,
                     max_steps=spec.max_steps,
                     record_every=spec.record_every, seed=seed)


def _cell_metrics(trace: Trace) -> tuple[float, float]:
    try:
        spt = slowest_pid_time(trace)
    except ValueError:
        spt = math.nan
    try:
        idle = idle_proportion(trace)
    except ValueError:
        idle = math.nan
    return spt, idle


def run_experiment(spec: ExperimentSpec, out_dir: str,
                   seed: int | None = None) -> tuple[str, bool]:
    """Run the full (k, variant) grid; returns (summary path, all converged).

    Cells run in listed order; each writes its own trace files under
    out_dir with a k/variant prefix.  Non-convergence marks the cell
    failed (nan metrics) but never aborts the sweep.
    """
    run_seed = spec.seed if seed is None else seed
    g = _build_graph(spec, run_seed)
    bad = [k for k in spec.k_list if not (1 <= k <= g.n)]
    if bad:
        raise ConfigError(f"k values outside [1, {g.n}]: "
                          f"{', '.join(map(str, bad))}")
    system = graphmod.build_pagerank_system(g, spec.damping)
    target = spec.target_error if spec.target_error is not None else 1.0 / g.n
    os.makedirs(out_dir, exist_ok=True)

    rows: list[str] = []
    all_ok = True
    for k in spec.k_list:
        for variant in spec.variants:
            cfg = _variant_config(spec, variant, k, target, run_seed)
            try:
                trace = run(system, cfg)
            except ConvergenceError as exc:
                trace = exc.trace
                all_ok = False
                logger.warning("cell k=%d %s did not converge in %d steps",
                               k, variant, trace.steps)
            prefix = os.path.join(out_dir, f"k{k:03d}_{variant}")
            write_csv(trace, prefix + "_trace.csv", prefix + "_summary.csv",
                      prefix + "_convergence.csv")
            spt, idle = _cell_metrics(trace) if trace.converged \
                else (math.nan, math.nan)
            rows.append(f"{k},{variant},{spt!r},{idle!r},{trace.steps}")
            logger.info("k=%d %s: slowest=%s idle=%s steps=%d",
                        k, variant, spt, idle, trace.steps)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        fh.write("k,variant,slowest_pid_time,idle_proportion,steps\n")
        fh.writelines(row + "\n" for row in rows)
    return summary_path, all_ok


def _resolve_out(flag: str | None, spec_dir: str | None) -> str:
    if flag:
        return flag
    if spec_dir:
        return spec_dir
    return os.environ.get(OUT_ENV) or "runs"


def _cmd_run(args: argparse.Namespace) -> int:
    spec = parse_config(args.config)
    out_dir = _resolve_out(args.out, spec.out_dir)
    summary_path, all_ok = run_experiment(spec, out_dir, seed=args.seed)
    print(summary_path)
    return 0 if all_ok else 1


def _cmd_stats(args: argparse.Namespace) -> int:
    g = graphmod.load_edge_list(args.edge_list, args.n_limit)
    print("n,l,avg_deg,dangling")
    print(graphmod.stats(g).csv_row())
    return 0


def _cmd_gen(args: argparse.Namespace) -> int:
    g = graphmod.synth_power_law(args.n, args.alpha, args.seed)
    graphmod.write_edge_list(g, args.out)
    print(args.out)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffusim",
        description="Partitioned fluid-diffusion solver experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="key=value config file")
    p_run.add_argument("--out", default=None,
                       help=f"output directory (beats config and ${OUT_ENV})")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    p_run.set_defaults(func=_cmd_run)

    p_stats = sub.add_parser("stats", help="summarize an edge-list file")
    p_stats.add_argument("edge_list")
    p_stats.add_argument("--n-limit", type=int, required=True,
                         help="keep only nodes with id < N")
    p_stats.set_defaults(func=_cmd_stats)

    p_gen = sub.add_parser("gen", help="generate a synthetic power-law graph")
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--alpha", type=float, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
