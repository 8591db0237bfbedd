"""Closed-loop control: estimate, propagate gradients, resolve, act.

Each tick advances the estimator graph with the previous action, then flows
goal gradients toward the actuators in topological order. At every quantity
where several gradient routes meet, they are ranked and projected
(`resolver.order_and_project`); the conflict-free sum continues downstream.
Quantities visited by a single route pass it through unchanged, so a
conflict-free model degenerates exactly to steepest descent.

The update rule integrates the resolved gradient into the actuation signal
(a <- a - k * grad), low-pass filters the command, and saturates it to the
configured speed limit. The steepest-descent baseline skips resolution and
exploration entirely and integrates the single largest-magnitude full-path
gradient instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

from . import exploration as ex
from . import resolver as rs
from .errors import NoPath, NonFiniteAction
from .gradients import GradientPath, enumerate_paths, propagate
from .graph import Graph, GraphView, estimator_step

MODE_FULL = "full"
MODE_NO_EXPLORATION = "no-exploration"
MODE_STEEPEST = "steepest"
MODES = (MODE_FULL, MODE_NO_EXPLORATION, MODE_STEEPEST)

# Per-tick decay of a conflicted command when exploration is disabled.
CONFLICT_BRAKE = 0.7


@dataclass
class ControllerConfig:
    gain: Any = 1.0
    dt: float = 0.02
    lowpass_alpha: float = 0.3
    mode: str = MODE_FULL
    max_ticks: int = 3000
    max_speed: float = 1.0
    margin: float = rs.DEFAULT_MARGIN
    tau: float = rs.DEFAULT_TAU
    eps_proj: float = rs.EPS_PROJ
    softmax_mode: str = rs.SOFTMAX_ORDERING_AND_SCALING
    explore_enter: float = ex.DEFAULT_ENTER
    explore_exit: float = ex.DEFAULT_EXIT
    explore_dominance: float = ex.DEFAULT_DOMINANCE
    ema_alpha: float = ex.DEFAULT_EMA_ALPHA
    explore_seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.gain, dtype=float)
        if np.any(g <= 0.0):
            raise ValueError("gain must be positive")
        if not 0.0 < self.lowpass_alpha <= 1.0:
            raise ValueError(f"lowpass_alpha must be in (0, 1], got {self.lowpass_alpha}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_ticks < 0:
            raise ValueError("max_ticks must be >= 0")


@dataclass
class FlowPlan:
    """Topological schedule for flowing gradients from goals to actuators."""

    order: list[str]
    outgoing: dict[str, list[str]]  # quantity -> edge ids with that target
    paths: dict[str, list[GradientPath]]  # actuator -> all goal paths


def build_flow_plan(graph: Graph, max_len: int = 8) -> FlowPlan:
    indeg = {nid: 0 for nid in graph.nodes}
    outgoing: dict[str, list[str]] = {nid: [] for nid in graph.nodes}
    for edge in graph.edges.values():
        indeg[edge.source] += 1
        outgoing[edge.target].append(edge.id)
    for edges in outgoing.values():
        edges.sort()
    order: list[str] = []
    ready = sorted(nid for nid, d in indeg.items() if d == 0)
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        for edge_id in outgoing[nid]:
            src = graph.edges[edge_id].source
            indeg[src] -= 1
            if indeg[src] == 0:
                ready.append(src)
        ready.sort()
    if len(order) != len(graph.nodes):
        raise ValueError("graph has a cycle in the goal-to-actuator orientation")

    paths: dict[str, list[GradientPath]] = {}
    for act in graph.actuators:
        collected: list[GradientPath] = []
        for goal_id in graph.goals:
            try:
                collected.extend(enumerate_paths(graph, goal_id, act, max_len))
            except NoPath:
                continue
        paths[act] = collected
    return FlowPlan(order=order, outgoing=outgoing, paths=paths)


@dataclass
class ResolverState:
    """Per-rollout memory: priority incumbents, exploration, filters."""

    plan: FlowPlan
    explore: ex.ExplorationState
    prev_order: dict[str, list[str]] = field(default_factory=dict)
    integrator: dict[str, np.ndarray] = field(default_factory=dict)
    filtered: dict[str, np.ndarray] = field(default_factory=dict)
    last_values: dict[str, np.ndarray] = field(default_factory=dict)


def init_resolver_state(graph: Graph, config: ControllerConfig, seed: int = 0) -> ResolverState:
    plan = build_flow_plan(graph)
    estate = ex.ExplorationState(
        ema_alpha=config.ema_alpha,
        enter_thresh=config.explore_enter,
        exit_thresh=config.explore_exit,
        dominance=config.explore_dominance,
        seed=0,
        _rng=np.random.default_rng([config.explore_seed, seed]),
    )
    state = ResolverState(plan=plan, explore=estate)
    for act in graph.actuators:
        dim = graph.nodes[act].dim
        state.integrator[act] = np.zeros(dim)
        state.filtered[act] = np.zeros(dim)
    for nid, node in graph.nodes.items():
        state.last_values[nid] = node.quantity.value.copy()
    return state


def low_pass(previous: np.ndarray, raw: np.ndarray, alpha: float) -> np.ndarray:
    """First-order low-pass: filtered = (1 - alpha) * previous + alpha * raw."""
    previous = np.asarray(previous, dtype=float)
    raw = np.asarray(raw, dtype=float)
    if previous.shape != raw.shape:
        raise ValueError(f"shape mismatch {previous.shape} vs {raw.shape}")
    return (1.0 - alpha) * previous + alpha * raw


@dataclass
class TickDiagnostics:
    costs: dict[str, float]
    candidate_magnitudes: dict[str, float]
    priority: tuple[str, ...]
    cos_top2: Optional[float]
    exploring: bool
    explore_quantity: Optional[str]
    resolved_quantity: Optional[str]
    gradient: dict[str, np.ndarray]
    action: dict[str, np.ndarray]


def tick(
    graph: Graph,
    config: ControllerConfig,
    state: ResolverState,
    measurements: Mapping[str, Any],
) -> tuple[dict[str, np.ndarray], TickDiagnostics]:
    """One control step. Returns the per-actuator action and diagnostics."""
    view = estimator_step(graph, measurements, _stacked_action(graph, state), config.dt)

    estate = state.explore
    for nid in state.plan.order:
        value = view.values[nid]
        ex.update_ema(estate, nid, value - state.last_values[nid])
        state.last_values[nid] = value.copy()

    costs = {
        gid: float(goal.cost(view.values[goal.node], view.covs[goal.node]))
        for gid, goal in graph.goals.items()
    }

    if config.mode == MODE_STEEPEST:
        grads, diag = _steepest_gradient(graph, view, state)
        suppress: dict[str, np.ndarray] = {}
    else:
        grads, diag, suppress = _resolved_gradient(graph, view, config, state)

    actions: dict[str, np.ndarray] = {}
    gain = np.asarray(config.gain, dtype=float)
    for act in graph.actuators:
        g = grads.get(act, np.zeros(graph.nodes[act].dim))
        if not np.all(np.isfinite(g)):
            raise NonFiniteAction(f"non-finite gradient at actuator {act!r}")
        axis = suppress.get(act)
        if axis is not None:
            # Active conflict: drop built-up momentum along the contested axis.
            proj = np.eye(axis.size) - np.outer(axis, axis)
            state.integrator[act] = proj @ state.integrator[act]
            state.filtered[act] = proj @ state.filtered[act]
            if config.mode == MODE_NO_EXPLORATION:
                # No escape mechanism: the conflicted command brakes to rest.
                state.integrator[act] = CONFLICT_BRAKE * state.integrator[act]
                state.filtered[act] = CONFLICT_BRAKE * state.filtered[act]
        raw = state.integrator[act] - gain * g
        raw = _saturate(raw, config.max_speed)
        state.integrator[act] = raw
        filt = low_pass(state.filtered[act], raw, config.lowpass_alpha)
        filt = _saturate(filt, config.max_speed)
        if not np.all(np.isfinite(filt)):
            raise NonFiniteAction(f"non-finite action at actuator {act!r}")
        state.filtered[act] = filt
        actions[act] = filt.copy()
        graph.set_value(act, filt)

    diag.costs = costs
    diag.gradient = grads
    diag.action = actions
    return actions, diag


def _stacked_action(graph: Graph, state: ResolverState) -> Optional[np.ndarray]:
    if not graph.actuators:
        return None
    return np.concatenate([state.filtered[a] for a in graph.actuators])


def _saturate(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n > limit > 0.0:
        return v * (limit / n)
    return v


def _empty_diag() -> TickDiagnostics:
    return TickDiagnostics(
        costs={},
        candidate_magnitudes={},
        priority=(),
        cos_top2=None,
        exploring=False,
        explore_quantity=None,
        resolved_quantity=None,
        gradient={},
        action={},
    )


def _steepest_gradient(graph: Graph, view: GraphView, state: ResolverState):
    """Largest-magnitude full-path gradient per actuator, no projection."""
    diag = _empty_diag()
    jac_cache: dict = {}
    grads: dict[str, np.ndarray] = {}
    for act, paths in state.plan.paths.items():
        evaluated = [propagate(graph, p, view, jac_cache) for p in paths]
        evaluated = [pg for pg in evaluated if pg.magnitude > rs.EPS_PROJ]
        if not evaluated:
            continue
        best = min(evaluated, key=lambda pg: (-pg.magnitude, pg.path.id))
        grads[act] = best.vector
        diag.candidate_magnitudes.update({pg.path.id: pg.magnitude for pg in evaluated})
        diag.priority = (best.path.id,)
        if len(evaluated) >= 2:
            second = min(
                (pg for pg in evaluated if pg.path is not best.path),
                key=lambda pg: (-pg.magnitude, pg.path.id),
            )
            diag.cos_top2 = ex.cosine(best.vector, second.vector)
    return grads, diag


def _resolved_gradient(
    graph: Graph, view: GraphView, config: ControllerConfig, state: ResolverState
):
    """Layered per-quantity resolution; returns actuator gradients.

    Conflict detection runs in both full and no-exploration modes. On a
    latched conflict the contested quantity stops contributing along the
    dominant axis; full mode substitutes motion in the dominant gradient's
    nullspace while no-exploration substitutes nothing, which is what makes
    it stall at structural conflicts.
    """
    diag = _empty_diag()
    estate = state.explore
    jac_cache: dict = {}
    flows: dict[str, list[tuple[str, np.ndarray]]] = {}
    for gid, goal in graph.goals.items():
        vec = np.asarray(
            goal.gradient(view.values[goal.node], view.covs[goal.node]), dtype=float
        ).reshape(-1)
        flows.setdefault(goal.node, []).append((gid, vec))

    resolved: dict[str, np.ndarray] = {}
    conflict_axis: dict[str, np.ndarray] = {}
    explore_active_seen = False
    for qty in state.plan.order:
        cands = flows.get(qty)
        if not cands:
            continue
        live = [(cid, v) for cid, v in cands if float(np.linalg.norm(v)) > config.eps_proj]
        if not live:
            continue
        axis = None
        if len(live) == 1:
            out = live[0][1]
            child = live[0][0]
        else:
            res = rs.order_and_project(
                live,
                state.prev_order.get(qty),
                margin=config.margin,
                tau=config.tau,
                eps_proj=config.eps_proj,
                softmax_mode=config.softmax_mode,
            )
            state.prev_order[qty] = list(res.priority_ids)
            out = res.combined
            child = f"{qty}*"
            top_id = res.priority_ids[0]
            others = [cid for cid in res.raw_magnitudes if cid != top_id]
            second_id = min(others, key=lambda c: (-res.raw_magnitudes[c], c))
            g_top = res.raw_vectors[top_id]
            g_second = res.raw_vectors[second_id]
            diag.candidate_magnitudes = dict(res.raw_magnitudes)
            diag.priority = tuple(res.priority_ids)
            diag.cos_top2 = ex.cosine(g_top, g_second)
            diag.resolved_quantity = qty

            conflicted_here = False
            if estate.mode == ex.EXPLORING and estate.active_quantity == qty:
                explore_active_seen = True
                if ex.detect_conflict(g_top, g_second, estate):
                    conflicted_here = True
                else:
                    estate.mode = ex.PURSUIT
                    estate.active_quantity = None
            elif estate.mode == ex.PURSUIT and not explore_active_seen:
                if ex.detect_conflict(g_top, g_second, estate):
                    estate.mode = ex.EXPLORING
                    estate.active_quantity = qty
                    conflicted_here = True
                    explore_active_seen = True
            if conflicted_here:
                axis = g_top / np.linalg.norm(g_top)
                w_dom = res.weights.get(top_id, 1.0)
                if config.mode == MODE_FULL:
                    u = ex.exploration_direction(g_top, estate, qty)
                    out = -w_dom * u
                    diag.exploring = True
                    diag.explore_quantity = qty
                else:
                    out = np.zeros_like(out)
        resolved[qty] = out
        for edge_id in state.plan.outgoing[qty]:
            edge = graph.edges[edge_id]
            if edge_id in jac_cache:
                jac = jac_cache[edge_id]
            else:
                jac = np.atleast_2d(np.asarray(edge.jacobian(view), dtype=float))
                jac_cache[edge_id] = jac
            flows.setdefault(edge.source, []).append((f"{child}|{edge_id}", out @ jac))
            if axis is not None:
                img = axis @ jac
                n = float(np.linalg.norm(img))
                nxt = edge.source
                if n > 1e-12 and nxt not in conflict_axis:
                    conflict_axis[nxt] = img / n
            elif qty in conflict_axis:
                img = conflict_axis[qty] @ jac
                n = float(np.linalg.norm(img))
                if n > 1e-12 and edge.source not in conflict_axis:
                    conflict_axis[edge.source] = img / n

    if estate.mode == ex.EXPLORING and not explore_active_seen:
        # The owning quantity lost its candidate set; conflict is gone.
        estate.mode = ex.PURSUIT
        estate.active_quantity = None

    grads = {act: resolved[act] for act in graph.actuators if act in resolved}
    suppress = {act: conflict_axis[act] for act in graph.actuators if act in conflict_axis}
    return grads, diag, suppress


@dataclass
class RolloutRecord:
    """Time-stamped trajectory plus gradient diagnostics for one episode."""

    scenario_id: str
    seed: int
    mode: str
    dt: float
    times: list[float] = field(default_factory=list)
    states: list[dict[str, float]] = field(default_factory=list)
    actions: list[tuple[float, ...]] = field(default_factory=list)
    cos_top2: list[Optional[float]] = field(default_factory=list)
    priority: list[tuple[str, ...]] = field(default_factory=list)
    exploring: list[bool] = field(default_factory=list)
    costs: list[dict[str, float]] = field(default_factory=list)
    success: bool = False
    success_tick: Optional[int] = None
    error: Optional[str] = None

    @property
    def ticks(self) -> int:
        return len(self.times)


def run_rollout(
    env,
    graph: Graph,
    config: ControllerConfig,
    seed: int,
    scenario_id: str = "",
    mode_label: str = "",
) -> RolloutRecord:
    """Run one closed-loop episode against an environment.

    The environment must provide reset(rng) -> measurements,
    step(action, dt) -> measurements, observe() -> flat state dict,
    succeeded() / failed() -> bool, and a `sustain` tick count that
    instantaneous success must persist for. All stochasticity derives from
    `seed`, so identical seeds give identical records.
    """
    record = RolloutRecord(
        scenario_id=scenario_id,
        seed=seed,
        mode=mode_label or config.mode,
        dt=config.dt,
    )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    measurements = env.reset(rng)
    state = init_resolver_state(graph, config, seed)
    sustain_needed = int(getattr(env, "sustain", 1))
    sustained = 0
    for t in range(config.max_ticks):
        try:
            actions, diag = tick(graph, config, state, measurements)
        except NonFiniteAction as exc:
            record.error = str(exc)
            break
        measurements = env.step(_flat_action(graph, actions), config.dt)
        record.times.append((t + 1) * config.dt)
        record.states.append(env.observe())
        record.actions.append(tuple(float(x) for x in _flat_action(graph, actions)))
        record.cos_top2.append(diag.cos_top2)
        record.priority.append(diag.priority)
        record.exploring.append(diag.exploring)
        record.costs.append(diag.costs)
        if env.succeeded():
            sustained += 1
            if sustained >= sustain_needed:
                record.success = True
                record.success_tick = t
                break
        else:
            sustained = 0
        if env.failed():
            break
    return record


def _flat_action(graph: Graph, actions: dict[str, np.ndarray]) -> np.ndarray:
    if not actions:
        return np.zeros(sum(graph.nodes[a].dim for a in graph.actuators))
    return np.concatenate([actions[a] for a in graph.actuators])
