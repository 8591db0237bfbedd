"""World model as a graph of recursive estimators.

Each node tracks one quantity (a state vector, optionally with a Gaussian
covariance) and owns a predict/correct pair, so it behaves as a recursive
estimator. Interconnections couple node states through differentiable maps:
`forward` produces the target state from the current snapshot and `jacobian`
returns d(target)/d(source) evaluated at the snapshot. Goal costs attach to
nodes and expose analytic gradients.

Conventions:
 - forward/jacobian take a `GraphView` (values + covariances by node id) so
   maps may read auxiliary nodes beyond their declared source.
 - edges tagged `apply_forward` are re-evaluated once per estimator step, in
   insertion order, after all predicts and corrects.
 - matrices embedded in state vectors are flattened row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteState, UnknownNode

Array = np.ndarray


class GraphView(NamedTuple):
    """Read-only snapshot of node values and covariances."""

    values: Mapping[str, Array]
    covs: Mapping[str, Optional[Array]]


# predict(value, cov, action, dt) -> (value, cov)
PredictFn = Callable[[Array, Optional[Array], Optional[Array], float], tuple]
# correct(value, cov, measurement, view) -> (value, cov)
CorrectFn = Callable[[Array, Optional[Array], Any, GraphView], tuple]
ForwardFn = Callable[[GraphView], Array]
JacobianFn = Callable[[GraphView], Array]
CostFn = Callable[[Array, Optional[Array]], float]
GradFn = Callable[[Array, Optional[Array]], Array]


def identity_predict(value, cov, action, dt):
    return value, cov


def substitute_correct(value, cov, measurement, view):
    """Point-node correction: adopt the measurement verbatim."""
    return np.asarray(measurement, dtype=float).reshape(value.shape), cov


@dataclass
class Quantity:
    id: str
    dim: int
    value: Array
    units: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float).reshape(-1)
        if self.value.shape != (self.dim,):
            raise DimensionMismatch(
                f"quantity {self.id!r}: value has {self.value.size} entries, dim is {self.dim}"
            )
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteState(f"quantity {self.id!r}: non-finite initial value")


@dataclass
class EstimatorNode:
    quantity: Quantity
    covariance: Optional[Array] = None
    predict: PredictFn = identity_predict
    correct: Optional[CorrectFn] = None

    def __post_init__(self):
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=float)
            d = self.quantity.dim
            if self.covariance.shape != (d, d):
                raise DimensionMismatch(
                    f"node {self.id!r}: covariance shape {self.covariance.shape}, expected ({d}, {d})"
                )

    @property
    def id(self) -> str:
        return self.quantity.id

    @property
    def dim(self) -> int:
        return self.quantity.dim


@dataclass
class Interconnection:
    id: str
    source: str
    target: str
    forward: ForwardFn
    jacobian: JacobianFn
    apply_forward: bool = False


@dataclass
class GoalSpec:
    id: str
    node: str
    cost: CostFn
    gradient: GradFn


@dataclass
class Graph:
    nodes: dict[str, EstimatorNode] = field(default_factory=dict)
    edges: dict[str, Interconnection] = field(default_factory=dict)
    actuators: tuple[str, ...] = ()
    goals: dict[str, GoalSpec] = field(default_factory=dict)

    def view(self) -> GraphView:
        values = {nid: n.quantity.value for nid, n in self.nodes.items()}
        covs = {nid: n.covariance for nid, n in self.nodes.items()}
        return GraphView(values, covs)

    def value(self, node_id: str) -> Array:
        return self.nodes[node_id].quantity.value

    def set_value(self, node_id: str, value) -> None:
        node = self.nodes[node_id]
        value = np.asarray(value, dtype=float).reshape(-1)
        if value.shape != (node.dim,):
            raise DimensionMismatch(
                f"node {node_id!r}: assigned value of size {value.size}, dim is {node.dim}"
            )
        node.quantity.value = value

    def cov(self, node_id: str) -> Optional[Array]:
        return self.nodes[node_id].covariance


def check_psd(cov: Array, node_id: str = "?", tol: float = 1e-9) -> None:
    """Reject covariances that are visibly asymmetric or indefinite."""
    if not np.allclose(cov, cov.T, atol=tol):
        raise NonFiniteState(f"node {node_id!r}: covariance not symmetric")
    w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if w.min() < -tol:
        raise NonFiniteState(f"node {node_id!r}: covariance has eigenvalue {w.min():.3e}")


def build_graph(
    nodes: Sequence[EstimatorNode],
    edges: Sequence[Interconnection] = (),
    actuators: Sequence[str] = (),
    goals: Sequence[GoalSpec] = (),
) -> Graph:
    """Validate and assemble a graph.

    Rejects dangling node references and edges/goals whose evaluated
    jacobian or gradient shape disagrees with the endpoint dims.
    """
    graph = Graph()
    for node in nodes:
        if node.id in graph.nodes:
            raise DimensionMismatch(f"duplicate node id {node.id!r}")
        graph.nodes[node.id] = node

    for edge in edges:
        for end in (edge.source, edge.target):
            if end not in graph.nodes:
                raise UnknownNode(f"edge {edge.id!r} references unknown node {end!r}")
        if edge.id in graph.edges:
            raise DimensionMismatch(f"duplicate edge id {edge.id!r}")
        graph.edges[edge.id] = edge

    for act in actuators:
        if act not in graph.nodes:
            raise UnknownNode(f"actuator {act!r} is not a node")
    graph.actuators = tuple(actuators)

    for goal in goals:
        if goal.node not in graph.nodes:
            raise UnknownNode(f"goal {goal.id!r} attaches to unknown node {goal.node!r}")
        graph.goals[goal.id] = goal

    view = graph.view()
    for edge in graph.edges.values():
        jac = np.atleast_2d(np.asarray(edge.jacobian(view), dtype=float))
        want = (graph.nodes[edge.target].dim, graph.nodes[edge.source].dim)
        if jac.shape != want:
            raise DimensionMismatch(
                f"edge {edge.id!r}: jacobian shape {jac.shape}, expected {want}"
            )
    for goal in graph.goals.values():
        node = graph.nodes[goal.node]
        grad = np.asarray(goal.gradient(node.quantity.value, node.covariance), dtype=float)
        if grad.reshape(-1).shape != (node.dim,):
            raise DimensionMismatch(
                f"goal {goal.id!r}: gradient has {grad.size} entries, node dim is {node.dim}"
            )
    return graph


def estimator_step(
    graph: Graph,
    measurements: Mapping[str, Any],
    action: Optional[Array],
    dt: float,
) -> GraphView:
    """Advance every estimator one tick.

    Order: predict all nodes with (action, dt), correct nodes that received a
    measurement, then apply the `apply_forward` interconnections in insertion
    order. Mutates the graph in place and returns the new snapshot.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    for node_id in measurements:
        if node_id not in graph.nodes:
            raise UnknownNode(f"measurement for unknown node {node_id!r}")

    for node in graph.nodes.values():
        value, cov = node.predict(node.quantity.value, node.covariance, action, dt)
        _store(node, value, cov)

    view = graph.view()
    for node_id, z in measurements.items():
        node = graph.nodes[node_id]
        if node.correct is None:
            continue
        value, cov = node.correct(node.quantity.value, node.covariance, z, view)
        _store(node, value, cov)
        view = graph.view()

    for edge in graph.edges.values():
        if not edge.apply_forward:
            continue
        node = graph.nodes[edge.target]
        value = np.asarray(edge.forward(view), dtype=float).reshape(-1)
        _store(node, value, node.covariance)
        view = graph.view()
    return view


def _store(node: EstimatorNode, value, cov) -> None:
    value = np.asarray(value, dtype=float).reshape(-1)
    if value.shape != (node.dim,):
        raise DimensionMismatch(
            f"node {node.id!r}: update produced {value.size} entries, dim is {node.dim}"
        )
    if not np.all(np.isfinite(value)):
        raise NonFiniteState(f"node {node.id!r}: update produced non-finite state")
    if cov is not None and not np.all(np.isfinite(cov)):
        raise NonFiniteState(f"node {node.id!r}: update produced non-finite covariance")
    node.quantity.value = value
    node.covariance = cov
