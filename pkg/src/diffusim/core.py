"""Residual-fluid diffusion primitives and the sequential solver.

The solver maintains two vectors: `fluid` (what is still to be processed,
initially B) and `history` (what each node has already emitted).  One
diffusion takes all fluid from a node, credits it to the node's history,
and pushes fluid*p(j,i) to every child j.  When the residual |fluid|_1
falls to the target, `history` approximates the fixed point X = P.X + B
with L1 error at most residual/epsilon.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graph import LinearSystem

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "DiffusionReceipt",
    "FluidState",
    "SelectorState",
    "diffuse",
    "error_bound",
    "init_state",
    "make_selector",
    "read_solution_csv",
    "read_vector",
    "select_next",
    "selection_weights",
    "solve_sequential",
    "write_solution_csv",
    "write_vector",
]

WEIGHT_SCHEMES = ("greedy", "inv_out", "inv_out_in")

# smallest positive normal float; below it x/decay may round back to x
_TINY_NORMAL = float(np.finfo(np.float64).tiny)


class ConvergenceError(RuntimeError):
    """Raised when a run exhausts its operation or step budget.

    Carries the residual at abort time and, for simulator runs, the trace
    collected so far.
    """

    def __init__(self, message: str, residual: float, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace


@dataclass
class FluidState:
    """Mutable solver state over the full node set.

    `residual` tracks |fluid|_1 incrementally; every `recompute_every`
    diffusions it is re-summed exactly to cap float drift.
    """

    fluid: np.ndarray
    history: np.ndarray
    residual: float
    diffusions: int = 0
    recompute_every: int = 0  # 0 disables the periodic exact pass

    def recompute(self) -> float:
        self.residual = float(np.abs(self.fluid).sum())
        return self.residual

    def at_target(self, target: float, extra: float = 0.0) -> bool:
        """Stop test with exact confirmation.

        The incremental residual only triggers the (exact) recomputation;
        the decision is always taken on the exact value, so sequential and
        simulated runs agree bit-for-bit on when to stop.
        """
        if self.residual + extra <= target:
            self.recompute()
            return self.residual + extra <= target
        return False


def init_state(sys: LinearSystem) -> FluidState:
    """Fresh state: history 0, fluid B, residual |B|_1."""
    f = np.array(sys.b, dtype=np.float64, copy=True)
    return FluidState(fluid=f, history=np.zeros(sys.graph.n),
                      residual=float(np.abs(f).sum()),
                      recompute_every=max(1, sys.graph.n))


@dataclass(slots=True)
class DiffusionReceipt:
    """What one diffusion did.

    local_ops is the number of in-set link updates (full column length
    when no membership filter is given); `external` carries the spilled
    (destination, amount) arrays for the caller to buffer in distributed
    mode; residual_delta is the exact change applied to the residual
    before any periodic recomputation.
    """

    node: int
    sent: float
    local_ops: int
    residual_delta: float
    external: tuple[np.ndarray, np.ndarray] | None = None


def diffuse(state: FluidState, sys: LinearSystem, node: int,
            membership: np.ndarray | None = None) -> DiffusionReceipt:
    """Move all fluid off `node`: history += sent, children += sent*p(j,i).

    With a membership mask only in-set children are updated in place; the
    out-of-set amounts are returned for external buffering.  Diffusing a
    node with zero fluid is a no-op that still reports its column length.
    """
    g = sys.graph
    dests, wts = g.column(node)
    f = state.fluid
    sent = float(f[node])
    state.history[node] += sent
    f[node] = 0.0
    dr = -abs(sent)
    external = None
    if membership is None:
        local = dests
        if local.size:
            old = f[local]
            new = old + sent * wts
            f[local] = new
            dr += float(np.abs(new).sum() - np.abs(old).sum())
    else:
        inside = membership[dests]
        local = dests[inside]
        if local.size:
            old = f[local]
            new = old + sent * wts[inside]
            f[local] = new
            dr += float(np.abs(new).sum() - np.abs(old).sum())
        outside = ~inside
        external = (dests[outside], sent * wts[outside])
    state.residual += dr
    state.diffusions += 1
    if state.recompute_every and state.diffusions % state.recompute_every == 0:
        state.recompute()
    return DiffusionReceipt(node=node, sent=sent, local_ops=int(local.size),
                            residual_delta=dr, external=external)


def selection_weights(graph, scheme: str) -> np.ndarray:
    """Per-node scan weights w_i for the threshold selector.

    greedy: 1 everywhere; inv_out: 1/#out; inv_out_in: 1/(#out * #in).
    Nodes missing the needed degree fall back to weight 1 so they stay
    selectable.
    """
    if scheme == "greedy":
        return np.ones(graph.n)
    if scheme == "inv_out":
        return np.where(graph.out_deg > 0, 1.0 / np.maximum(graph.out_deg, 1), 1.0)
    if scheme == "inv_out_in":
        prod = graph.out_deg * graph.in_deg
        return np.where(prod > 0, 1.0 / np.maximum(prod, 1), 1.0)
    raise ValueError(f"unknown weight scheme {scheme!r}; expected one of {WEIGHT_SCHEMES}")


@dataclass
class SelectorState:
    """Cyclic threshold scanner over an ordered node set.

    `weights` is indexed by global node id and may be shared between
    selectors; `cursor` is a position in the caller's node list.
    """

    threshold: float
    cursor: int
    decay: float
    weights: np.ndarray
    scheme: str


def make_selector(weights: np.ndarray, b: np.ndarray, nodes: np.ndarray,
                  decay: float = 1.2, scheme: str = "") -> SelectorState:
    """Selector whose initial threshold sits strictly above the initial
    weighted fluid of `nodes` (t0 = decay * max|b| * max w, fallback decay)."""
    if decay <= 1.0:
        raise ValueError(f"decay factor must exceed 1, got {decay}")
    base = float(np.abs(b[nodes]).max() * weights[nodes].max()) if len(nodes) else 0.0
    return SelectorState(threshold=decay * (base if base > 0.0 else 1.0),
                         cursor=0, decay=decay, weights=weights, scheme=scheme)


def select_next(sel: SelectorState, fluid: np.ndarray,
                nodes: np.ndarray) -> int | None:
    """Next node to diffuse, or None when the set holds no fluid at all.

    Scans cyclically from the cursor for the first node with
    |fluid|*w > threshold; when a full cycle finds none the threshold is
    divided by the decay factor until one qualifies.
    """
    fw = np.abs(fluid[nodes]) * sel.weights[nodes]
    m = float(fw.max())
    if m == 0.0:
        return None
    t = sel.threshold
    while m <= t:  # each division is one decayed full scan
        t /= sel.decay
        if t < _TINY_NORMAL:
            # sub-normal division can round back to t and stall; at this
            # scale any remaining mass qualifies
            t = 0.0
            break
    sel.threshold = t
    cur = sel.cursor
    hits = fw > t
    pos = int(hits[cur:].argmax())
    if not hits[cur + pos]:
        pos = int(hits[:cur].argmax())
        if not hits[pos]:  # unreachable: m > t guarantees a hit
            return None
    else:
        pos += cur
    sel.cursor = (pos + 1) % len(nodes)
    return int(nodes[pos])


def error_bound(residual: float, epsilon: float) -> float:
    """L1 distance bound to the exact solution: residual / epsilon."""
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return residual / epsilon


def solve_sequential(sys: LinearSystem, target_error: float,
                     selector: SelectorState | None = None,
                     max_ops: int | None = None) -> tuple[np.ndarray, int]:
    """Diffuse until |fluid|_1 <= target_error; return (history, link ops).

    The operation count is the total number of link updates (dangling
    columns cost nothing).  Raises ConvergenceError when max_ops
    (default 10**4 * L) is exceeded.
    """
    if target_error < 0.0:
        raise ValueError(f"target_error must be non-negative, got {target_error}")
    state = init_state(sys)
    nodes = np.arange(sys.graph.n)
    if selector is None:
        w = selection_weights(sys.graph, "inv_out")
        selector = make_selector(w, sys.b, nodes, scheme="inv_out")
    if max_ops is None:
        max_ops = 10_000 * max(sys.graph.l, 1)
    ops = 0
    while not state.at_target(target_error):
        node = select_next(selector, state.fluid, nodes)
        if node is None:
            break  # no fluid anywhere; exact residual is 0
        ops += diffuse(state, sys, node).local_ops
        if ops > max_ops:
            raise ConvergenceError(
                f"no convergence within {max_ops} link operations "
                f"(residual {state.recompute()!r}, target {target_error!r})",
                residual=state.residual)
    return state.history, ops


def write_solution_csv(path: str, history: np.ndarray) -> None:
    """Rows `node,h`, one per node, 17-significant-digit round-trip safe."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node,h\n")
        for i, v in enumerate(history.tolist()):
            fh.write(f"{i},{v!r}\n")


def read_solution_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "node,h":
            raise ValueError(f"{path}: unexpected header {header!r}")
        vals = [float(line.split(",")[1]) for line in fh if line.strip()]
    return np.array(vals)


def write_vector(path: str, v: np.ndarray) -> None:
    """Raw little-endian float64 dump."""
    np.asarray(v, dtype="<f8").tofile(path)


def read_vector(path: str) -> np.ndarray:
    return np.fromfile(path, dtype="<f8")
