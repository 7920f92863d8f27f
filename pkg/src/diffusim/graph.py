"""Column-major sparse graphs and the linear systems built on them.

A ColumnGraph stores, for every node i, the list of nodes j that i points
to, together with one weight per link.  Column i of the induced matrix P
holds the coefficients p(j, i), so "diffusing" node i means walking one
column.  Graphs are structurally immutable once built; weights are set by
the system constructors (e.g. build_pagerank_system).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "ColumnGraph",
    "GraphStats",
    "LinearSystem",
    "build_pagerank_system",
    "load_edge_list",
    "permute_nodes",
    "reorder_nodes",
    "stats",
    "synth_power_law",
    "write_edge_list",
]


@dataclass(eq=False)
class ColumnGraph:
    """CSC-like directed graph: column i lists the out-links of node i.

    rows/weights are concatenated per-column segments delimited by indptr;
    row indices are strictly increasing inside each column (canonical form,
    no duplicate link within a column).
    """

    n: int
    indptr: np.ndarray   # int64, shape (n+1,)
    rows: np.ndarray     # int64, shape (l,), destination node per link
    weights: np.ndarray  # float64, shape (l,)
    out_deg: np.ndarray  # int64, shape (n,), == diff(indptr)
    in_deg: np.ndarray   # int64, shape (n,)

    @property
    def l(self) -> int:
        return int(self.indptr[-1])

    def column(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Views of (destinations, weights) for the out-links of node i."""
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.rows[a:b], self.weights[a:b]

    def with_weights(self, weights: np.ndarray) -> "ColumnGraph":
        """Same structure, different link weights."""
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != self.rows.shape:
            raise ValueError(f"weights shape {w.shape} does not match link count {self.rows.shape}")
        return ColumnGraph(self.n, self.indptr, self.rows, w, self.out_deg, self.in_deg)

    def validate(self) -> None:
        """Assert structural invariants; used by tests and loaders."""
        if self.n < 0:
            raise ValueError("negative node count")
        if self.indptr.shape != (self.n + 1,) or self.indptr[0] != 0:
            raise ValueError("malformed indptr")
        if np.any(np.diff(self.indptr) < 0):
            raise ValueError("indptr not monotone")
        if self.rows.shape != self.weights.shape or self.rows.shape != (self.l,):
            raise ValueError("rows/weights length mismatch")
        if self.l and (self.rows.min() < 0 or self.rows.max() >= self.n):
            raise ValueError("row index out of range")
        for i in range(self.n):
            seg = self.rows[self.indptr[i]:self.indptr[i + 1]]
            if seg.size > 1 and np.any(np.diff(seg) <= 0):
                raise ValueError(f"column {i} not strictly increasing (duplicate link?)")
        if not np.array_equal(self.out_deg, np.diff(self.indptr)):
            raise ValueError("out_deg inconsistent with indptr")
        if not np.array_equal(self.in_deg, np.bincount(self.rows, minlength=self.n)):
            raise ValueError("in_deg inconsistent with rows")


def _from_pairs(n: int, src: np.ndarray, dst: np.ndarray,
                dedup: bool = True) -> ColumnGraph:
    """Build a canonical ColumnGraph from parallel (src, dst) arrays."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.size:
        # single int64 key keeps the sort/dedup exact for n up to ~3e9
        key = src * np.int64(n) + dst
        if dedup:
            key = np.unique(key)
        else:
            key = np.sort(key)
        src = key // n
        dst = key % n
    out_deg = np.bincount(src, minlength=n).astype(np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(out_deg, out=indptr[1:])
    in_deg = np.bincount(dst, minlength=n).astype(np.int64)
    return ColumnGraph(n, indptr, dst, np.ones(dst.size, dtype=np.float64),
                       out_deg, in_deg)


def load_edge_list(path: str, n_limit: int) -> ColumnGraph:
    """Read a `src dst` text edge list restricted to nodes below n_limit.

    Lines starting with '#' and blank lines are skipped.  Duplicate links
    collapse to one.  The result always has exactly n_limit nodes; nodes
    not mentioned in the file are isolated (dangling).
    """
    if n_limit <= 0:
        raise ValueError(f"n_limit must be positive, got {n_limit}")
    srcs: list[int] = []
    dsts: list[int] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 'src dst', got {text!r}")
            try:
                s, d = int(parts[0]), int(parts[1])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-integer endpoint in {text!r}") from None
            if s < 0 or d < 0:
                raise ValueError(f"{path}: line {lineno}: negative node id in {text!r}")
            if s < n_limit and d < n_limit:
                srcs.append(s)
                dsts.append(d)
    return _from_pairs(n_limit, np.array(srcs, dtype=np.int64),
                       np.array(dsts, dtype=np.int64))


def write_edge_list(g: ColumnGraph, path: str) -> None:
    """Serialize the structure as `src dst` lines (weights are not kept)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(g.n):
            for j in g.rows[g.indptr[i]:g.indptr[i + 1]]:
                fh.write(f"{i} {j}\n")


def synth_power_law(n: int, alpha: float, seed: int) -> ColumnGraph:
    """Random digraph with power-law out- and in-degree marginals.

    Out- and in-degrees are drawn iid from Pr(k) ~ 1/k**alpha on
    {1, ..., n-1}; link stubs are matched through seeded shuffles, the
    longer stub list truncated to the shorter, then self-loops and
    duplicate links are dropped.  Fully deterministic given the seed.
    """
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    if alpha <= 1.0:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    rng = np.random.default_rng(seed)
    support = np.arange(1, n, dtype=np.float64)
    cdf = np.cumsum(support ** -alpha)
    cdf /= cdf[-1]
    out_deg = np.searchsorted(cdf, rng.random(n)) + 1
    in_deg = np.searchsorted(cdf, rng.random(n)) + 1
    out_stubs = np.repeat(np.arange(n, dtype=np.int64), out_deg)
    in_stubs = np.repeat(np.arange(n, dtype=np.int64), in_deg)
    rng.shuffle(out_stubs)
    rng.shuffle(in_stubs)
    m = min(out_stubs.size, in_stubs.size)
    src, dst = out_stubs[:m], in_stubs[:m]
    keep = src != dst
    return _from_pairs(n, src[keep], dst[keep])


def permute_nodes(g: ColumnGraph, perm: np.ndarray) -> ColumnGraph:
    """Relabel nodes: old node v becomes perm[v].  perm must be a permutation."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.n,) or not np.array_equal(np.sort(perm), np.arange(g.n)):
        raise ValueError("perm is not a permutation of range(n)")
    src = np.repeat(np.arange(g.n, dtype=np.int64), g.out_deg)
    return _from_pairs(g.n, perm[src], perm[g.rows], dedup=False)


def reorder_nodes(g: ColumnGraph, ordering: str, seed: int | None = None) -> ColumnGraph:
    """Relabel nodes by a named ordering.

    'random' needs a seed; 'out_degree_desc' / 'in_degree_desc' place
    high-degree nodes first, ties broken by original index.
    """
    if ordering == "random":
        if seed is None:
            raise ValueError("random ordering requires a seed")
        perm = np.empty(g.n, dtype=np.int64)
        perm[np.random.default_rng(seed).permutation(g.n)] = np.arange(g.n)
    elif ordering in ("out_degree_desc", "in_degree_desc"):
        deg = g.out_deg if ordering == "out_degree_desc" else g.in_deg
        order = np.lexsort((np.arange(g.n), -deg))  # stable: (-deg, old index)
        perm = np.empty(g.n, dtype=np.int64)
        perm[order] = np.arange(g.n)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    return permute_nodes(g, perm)


@dataclass(frozen=True)
class GraphStats:
    n: int
    l: int
    dangling: int

    @property
    def avg_deg(self) -> float:
        return self.l / self.n

    def csv_row(self) -> str:
        return f"{self.n},{self.l},{self.avg_deg!r},{self.dangling}"


def stats(g: ColumnGraph) -> GraphStats:
    """Node/link counts plus the number of out-degree-zero (dangling) nodes."""
    return GraphStats(n=g.n, l=g.l, dangling=int(np.count_nonzero(g.out_deg == 0)))


@dataclass(frozen=True)
class LinearSystem:
    """Fixed-point system X = P.X + B with contraction margin epsilon.

    P is given column-wise by `graph` (entry p(j, i) = weight of link i->j);
    epsilon bounds 1 - |P| so residual/epsilon bounds the solution error.
    """

    graph: ColumnGraph
    b: np.ndarray
    epsilon: float

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.b.shape != (self.graph.n,):
            raise ValueError("b length does not match node count")


def build_pagerank_system(g: ColumnGraph, damping: float = 0.85) -> LinearSystem:
    """PageRank fixed point: p(j,i) = damping/out_deg[i], uniform B.

    Dangling columns stay all-zero, so their fluid leaves the system (the
    classical "lost mass" convention).  Column sums are exactly `damping`
    for non-dangling nodes, hence epsilon = 1 - damping.
    """
    if not (0.0 < damping < 1.0):
        raise ValueError(f"damping must be in (0, 1), got {damping}")
    safe = np.where(g.out_deg > 0, g.out_deg, 1)
    weights = np.repeat(damping / safe, g.out_deg)
    b = np.full(g.n, (1.0 - damping) / g.n)
    return LinearSystem(graph=g.with_weights(weights), b=b, epsilon=1.0 - damping)
