"""Goal-to-actuator gradient paths and chain-rule propagation.

A gradient path is an ordered chain of interconnections leading from a
goal's node toward a terminal quantity (usually an actuation signal). The
path gradient is the row-vector product of the goal gradient with each edge
jacobian in order, i.e. the sensitivity of the goal cost to the terminal
quantity along that particular route through the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NoPath, NonFiniteGradient, UnknownNode
from .graph import Graph, GraphView

MAX_PATH_LEN = 8


@dataclass(frozen=True)
class GradientPath:
    goal: str
    edges: tuple[str, ...]
    terminal: str

    @property
    def id(self) -> str:
        return f"{self.goal}:" + "/".join(self.edges)


@dataclass
class PathGradient:
    path: GradientPath
    vector: np.ndarray
    magnitude: float


def enumerate_paths(
    graph: Graph, goal_id: str, terminal: str, max_len: int = MAX_PATH_LEN
) -> list[GradientPath]:
    """All simple goal->terminal paths of at most `max_len` edges.

    Edges are traversed from target to source (the direction gradients
    flow). Results are ordered lexicographically by edge-id sequence.
    """
    if goal_id not in graph.goals:
        raise UnknownNode(f"unknown goal {goal_id!r}")
    if terminal not in graph.nodes:
        raise UnknownNode(f"unknown terminal {terminal!r}")
    start = graph.goals[goal_id].node
    by_target: dict[str, list] = {}
    for edge in graph.edges.values():
        by_target.setdefault(edge.target, []).append(edge)
    for edges in by_target.values():
        edges.sort(key=lambda e: e.id)

    found: list[GradientPath] = []

    def dfs(node: str, chain: list[str], visited: set[str]) -> None:
        if node == terminal:
            found.append(GradientPath(goal_id, tuple(chain), terminal))
            return
        if len(chain) >= max_len:
            return
        for edge in by_target.get(node, ()):
            if edge.source in visited:
                continue
            chain.append(edge.id)
            visited.add(edge.source)
            dfs(edge.source, chain, visited)
            visited.discard(edge.source)
            chain.pop()

    dfs(start, [], {start})
    if not found:
        raise NoPath(f"no path from goal {goal_id!r} to {terminal!r} within {max_len} edges")
    found.sort(key=lambda p: p.edges)
    return found


def propagate(
    graph: Graph,
    path: GradientPath,
    view: Optional[GraphView] = None,
    jac_cache: Optional[dict] = None,
) -> PathGradient:
    """Evaluate one path gradient at the current (or given) snapshot.

    `jac_cache` lets one control tick share edge-jacobian evaluations
    across the many paths that traverse the same edges.
    """
    if view is None:
        view = graph.view()
    goal = graph.goals[path.goal]
    node = graph.nodes[goal.node]
    row = np.asarray(goal.gradient(view.values[goal.node], view.covs[goal.node]), dtype=float)
    row = row.reshape(1, -1)
    for edge_id in path.edges:
        jac = _edge_jacobian(graph, edge_id, view, jac_cache)
        row = row @ jac
    vector = row.reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise NonFiniteGradient(f"path {path.id}: non-finite gradient")
    return PathGradient(path, vector, float(np.linalg.norm(vector)))


def fd_oracle(graph: Graph, path: GradientPath, h: float = 1e-6) -> PathGradient:
    """Central-finite-difference estimate of the same path derivative.

    Composes the edge forward maps from the terminal back up to the goal
    node and differences the goal cost; independent of the analytic
    jacobians, so it serves as a test oracle for `propagate`.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    view = graph.view()
    goal = graph.goals[path.goal]
    base = dict(view.values)
    terminal = path.terminal
    dim = graph.nodes[terminal].dim

    def cost_at(perturbed_terminal: np.ndarray) -> float:
        values = dict(base)
        values[terminal] = perturbed_terminal
        v = GraphView(values, view.covs)
        for edge_id in reversed(path.edges):
            edge = graph.edges[edge_id]
            values[edge.target] = np.asarray(edge.forward(v), dtype=float).reshape(-1)
            v = GraphView(values, view.covs)
        return float(goal.cost(values[goal.node], view.covs[goal.node]))

    x0 = base[terminal]
    vector = np.zeros(dim)
    for j in range(dim):
        step = h * (1.0 + abs(float(x0[j])))
        hi = x0.copy()
        hi[j] += step
        lo = x0.copy()
        lo[j] -= step
        vector[j] = (cost_at(hi) - cost_at(lo)) / (2.0 * step)
    return PathGradient(path, vector, float(np.linalg.norm(vector)))


def settle_path(graph: Graph, path: GradientPath) -> None:
    """Make the snapshot self-consistent along one path.

    Re-evaluates each edge forward from the terminal toward the goal node so
    that stored values equal their forward images; `propagate` and
    `fd_oracle` agree only at such points.
    """
    for edge_id in reversed(path.edges):
        edge = graph.edges[edge_id]
        graph.set_value(edge.target, edge.forward(graph.view()))


def fd_edge_jacobian(graph: Graph, edge_id: str, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of one edge forward map w.r.t. its source."""
    edge = graph.edges[edge_id]
    view = graph.view()
    x0 = np.asarray(view.values[edge.source], dtype=float)
    rows = graph.nodes[edge.target].dim
    jac = np.zeros((rows, x0.size))
    for j in range(x0.size):
        step = h * (1.0 + abs(float(x0[j])))
        for sign in (1.0, -1.0):
            values = dict(view.values)
            xp = x0.copy()
            xp[j] += sign * step
            values[edge.source] = xp
            out = np.asarray(edge.forward(GraphView(values, view.covs)), dtype=float)
            jac[:, j] += sign * out.reshape(-1) / (2.0 * step)
    return jac


def _edge_jacobian(graph: Graph, edge_id: str, view: GraphView, cache: Optional[dict]):
    if cache is not None and edge_id in cache:
        return cache[edge_id]
    jac = np.atleast_2d(np.asarray(graph.edges[edge_id].jacobian(view), dtype=float))
    if cache is not None:
        cache[edge_id] = jac
    return jac
