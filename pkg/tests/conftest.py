"""Shared fixtures: dense reference solves and random test systems.

The dense oracle deliberately avoids the library's own solve path: it
rebuilds P entry by entry from the stored columns and uses LAPACK
elimination, so any agreement with the diffusion solver is meaningful.
"""

import numpy as np
import pytest

from diffusim.graph import ColumnGraph, LinearSystem, build_pagerank_system

ACCEPTANCE_PREFIX = "acceptance: "
_acceptance_lines = []


def densify(g: ColumnGraph) -> np.ndarray:
    """Dense P with P[j, i] = weight of link i->j."""
    P = np.zeros((g.n, g.n))
    for i in range(g.n):
        rows, wts = g.column(i)
        P[rows, i] = wts
    return P


def dense_solution(sys: LinearSystem) -> np.ndarray:
    """Reference fixed point X* = (I - P)^-1 B by dense elimination."""
    P = densify(sys.graph)
    return np.linalg.solve(np.eye(sys.graph.n) - P, sys.b)


def random_graph(n: int, rng: np.random.Generator,
                 density: float = 0.02) -> ColumnGraph:
    """Erdos-Renyi-ish sparse graph, possibly with dangling nodes."""
    m = max(n, int(density * n * n))
    src = rng.integers(0, n, size=m)
    dst = rng.integers(0, n, size=m)
    keep = src != dst
    from diffusim.graph import _from_pairs
    return _from_pairs(n, src[keep], dst[keep])


def random_pagerank_system(n: int, seed: int,
                           damping: float = 0.85) -> LinearSystem:
    rng = np.random.default_rng(seed)
    return build_pagerank_system(random_graph(n, rng), damping)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    state = "PASS" if passed else "FAIL"
    _acceptance_lines.append(
        f"{ACCEPTANCE_PREFIX}criterion {criterion:2d} {state}  {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)
