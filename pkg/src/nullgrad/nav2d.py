"""2D navigation testbed: reach a target among non-convex obstacles.

A planar point agent under velocity control senses only the bearing to the
target and the range to the nearest obstacle boundary. The belief graph
tracks the agent position (exact odometry), an absolute Gaussian target
belief updated by a bearing-only EKF, the target position relative to the
agent, and the obstacle clearance.

Goal costs: expected distance to target (relative mean norm plus belief
trace) and a collision likelihood that decays exponentially with clearance.
Three gradient routes reach the velocity signal: through the relative
target mean, through the anticipated posterior covariance (lateral motion
improves triangulation geometry), and through the obstacle clearance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DegeneratePolygon
from .geometry import (
    closest_point_on_polygon,
    ensure_ccw,
    point_in_polygon,
    smooth_norm,
    wrap_angle,
)
from .graph import (
    EstimatorNode,
    GoalSpec,
    Graph,
    Interconnection,
    Quantity,
    build_graph,
    substitute_correct,
)

SIGMA_REP = 0.5  # m, collision-likelihood length scale
SUCCESS_RADIUS = 0.1  # m
FAR_CLEARANCE = 1e3  # reported clearance when no obstacle exists
RHO_MIN = 0.5  # m, bearing geometry floor; below this a bearing adds no range info


@dataclass
class NavWorld:
    """Ground-truth state of the navigation environment."""

    agent: np.ndarray
    target: np.ndarray
    obstacles: list[np.ndarray] = field(default_factory=list)
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 10.0, 10.0)
    bearing_noise: float = 0.05  # rad
    range_noise: float = 0.01  # m
    action_noise: float = 0.0  # m/s per axis

    def __post_init__(self):
        self.agent = np.asarray(self.agent, dtype=float).reshape(2)
        self.target = np.asarray(self.target, dtype=float).reshape(2)
        self.obstacles = [ensure_ccw(np.asarray(p, dtype=float)) for p in self.obstacles]
        for poly in self.obstacles:
            _check_simple(poly)
        for name, p in (("agent", self.agent), ("target", self.target)):
            if not _in_bounds(p, self.bounds):
                raise ValueError(f"{name} outside workspace bounds")
            for poly in self.obstacles:
                if point_in_polygon(p, poly):
                    raise ValueError(f"{name} starts inside an obstacle")


@dataclass
class NavBelief:
    """Agent-side estimate extracted from the graph."""

    x_rob: np.ndarray
    x_obs: float
    mu_tar: np.ndarray  # relative to the agent
    sigma_tar: np.ndarray


def nearest_obstacle(p: np.ndarray, obstacles) -> tuple[np.ndarray, float]:
    """Closest boundary point over all obstacle polygons and its distance."""
    best_pt, best_d = None, np.inf
    for poly in obstacles:
        pt, _, d = closest_point_on_polygon(p, poly)
        if d < best_d:
            best_pt, best_d = pt, d
    if best_pt is None:
        return p + np.array([FAR_CLEARANCE, 0.0]), FAR_CLEARANCE
    return best_pt, best_d


def env_step(
    world: NavWorld,
    velocity: np.ndarray,
    dt: float,
    rng: Optional[np.random.Generator] = None,
) -> tuple[NavWorld, float, float, bool]:
    """Integrate the agent and emit (world', z_tar, z_obs, collided)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    v = np.asarray(velocity, dtype=float).reshape(2)
    if rng is not None and world.action_noise > 0.0:
        v = v + rng.normal(0.0, world.action_noise, 2)
    agent = world.agent + v * dt
    agent = np.clip(agent, (world.bounds[0], world.bounds[1]), (world.bounds[2], world.bounds[3]))
    new = replace(world, agent=agent)

    rel = new.target - agent
    z_tar = float(np.arctan2(rel[1], rel[0]))
    _, d = nearest_obstacle(agent, new.obstacles)
    z_obs = d
    if rng is not None:
        if world.bearing_noise > 0.0:
            z_tar = wrap_angle(z_tar + rng.normal(0.0, world.bearing_noise))
        if world.range_noise > 0.0:
            z_obs = max(0.0, z_obs + rng.normal(0.0, world.range_noise))
    collided = any(point_in_polygon(agent, poly) for poly in new.obstacles)
    return new, z_tar, z_obs, collided


def nav_goal_g1(mu_tar: np.ndarray, sigma_tar: np.ndarray) -> float:
    """Expected target distance: relative mean norm plus covariance trace."""
    return smooth_norm(np.asarray(mu_tar, dtype=float)) + float(np.trace(sigma_tar))


def nav_goal_g2(x_obs: float, sigma_rep: float = SIGMA_REP) -> float:
    """Collision likelihood, strictly decreasing with clearance."""
    return float(np.exp(-max(0.0, x_obs) / sigma_rep))


def bearing_ekf_update(
    mu: np.ndarray, cov: np.ndarray, z: float, vantage: np.ndarray, bearing_std: float
) -> tuple[np.ndarray, np.ndarray]:
    """EKF correction of an absolute 2D position belief from one bearing."""
    d = mu - vantage
    rho2 = max(float(d @ d), RHO_MIN**2)
    zhat = float(np.arctan2(d[1], d[0]))
    h_row = np.array([-d[1], d[0]]) / rho2
    s = float(h_row @ cov @ h_row) + bearing_std**2
    k = (cov @ h_row) / s
    innovation = wrap_angle(float(z) - zhat)
    mu_new = mu + k * innovation
    a = np.eye(2) - np.outer(k, h_row)
    cov_new = a @ cov @ a.T + np.outer(k, k) * bearing_std**2
    return mu_new, 0.5 * (cov_new + cov_new.T)


def anticipated_cov(
    mu_abs: np.ndarray, cov: np.ndarray, rob: np.ndarray, bearing_std: float
) -> np.ndarray:
    """Posterior covariance a bearing taken from `rob` would leave behind."""
    d = mu_abs - rob
    rho2 = max(float(d @ d), RHO_MIN**2)
    h_row = np.array([-d[1], d[0]]) / rho2
    u = cov @ h_row
    s = float(h_row @ u) + bearing_std**2
    return cov - np.outer(u, u) / s


def anticipated_cov_jacobian(
    mu_abs: np.ndarray, cov: np.ndarray, rob: np.ndarray, bearing_std: float
) -> np.ndarray:
    """d vec(anticipated_cov) / d rob, row-major flattening; shape (4, 2)."""
    d = mu_abs - rob
    rho2 = float(d @ d)
    d0, d1 = float(d[0]), float(d[1])
    if rho2 < RHO_MIN**2:
        # Below the floor H = [-d1, d0] / RHO_MIN^2 is linear in d.
        rho2 = RHO_MIN**2
        dh_dd = np.array([[0.0, -1.0], [1.0, 0.0]]) / rho2
    else:
        dh_dd = np.array(
            [[2.0 * d0 * d1, d1 * d1 - d0 * d0], [d1 * d1 - d0 * d0, -2.0 * d0 * d1]]
        ) / (rho2 * rho2)
    h_row = np.array([-d[1], d[0]]) / rho2
    u = cov @ h_row
    s = float(h_row @ u) + bearing_std**2
    jac = np.zeros((4, 2))
    for k in range(2):
        dh = -dh_dd[:, k]  # d h_row / d rob_k
        du = cov @ dh
        ds = 2.0 * float(dh @ u)
        dcov = -(np.outer(du, u) + np.outer(u, du)) / s + np.outer(u, u) * ds / (s * s)
        jac[:, k] = dcov.reshape(-1)
    return jac


@dataclass
class NavParams:
    """Belief-model constants for the navigation graph."""

    sigma_rep: float = SIGMA_REP
    bearing_std: float = 0.05  # filter measurement noise (rad)
    process_noise: float = 0.02  # m^2/s added to the target belief
    sigma0: float = 1.0  # initial target belief std per axis (m)
    dt: float = 0.02


def build_nav_graph(
    world: NavWorld, mu0: Optional[np.ndarray] = None, params: Optional[NavParams] = None
) -> Graph:
    """Assemble the navigation belief graph.

    Exactly three goal-to-actuation gradient routes exist: through the
    relative target mean, through the anticipated bearing-update
    covariance, and through the obstacle clearance.
    """
    p = params or NavParams()
    mu0 = np.asarray(world.target if mu0 is None else mu0, dtype=float).reshape(2)
    sigma0 = np.eye(2) * p.sigma0**2
    obs_pt0, obs_d0 = nearest_obstacle(world.agent, world.obstacles)

    def rob_predict(value, cov, action, dt):
        if action is None:
            return value, cov
        return value + action[:2] * dt, cov

    def tar_predict(value, cov, action, dt):
        return value, cov + p.process_noise * dt * np.eye(2)

    def tar_correct(value, cov, z, view):
        return bearing_ekf_update(value, cov, float(z), view.values["rob"], p.bearing_std)

    nodes = [
        EstimatorNode(Quantity("act", 2, np.zeros(2), units="m/s")),
        EstimatorNode(
            Quantity("rob", 2, world.agent.copy(), units="m"),
            predict=rob_predict,
            correct=substitute_correct,
        ),
        EstimatorNode(Quantity("obs_pt", 2, obs_pt0, units="m"), correct=substitute_correct),
        EstimatorNode(Quantity("obs_dist", 1, [obs_d0], units="m"), correct=substitute_correct),
        EstimatorNode(
            Quantity("tar_abs", 2, mu0, units="m"),
            covariance=sigma0,
            predict=tar_predict,
            correct=tar_correct,
        ),
        EstimatorNode(
            Quantity(
                "tar",
                6,
                np.concatenate([mu0 - world.agent, sigma0.reshape(-1)]),
                units="m,m^2",
            )
        ),
    ]

    jac_mu = np.vstack([-np.eye(2), np.zeros((4, 2))])

    def fwd_mu(view):
        return np.concatenate(
            [view.values["tar_abs"] - view.values["rob"], view.covs["tar_abs"].reshape(-1)]
        )

    def fwd_cov(view):
        cov_next = anticipated_cov(
            view.values["tar_abs"], view.covs["tar_abs"], view.values["rob"], p.bearing_std
        )
        return np.concatenate([view.values["tar"][:2], cov_next.reshape(-1)])

    def jac_cov(view):
        body = anticipated_cov_jacobian(
            view.values["tar_abs"], view.covs["tar_abs"], view.values["rob"], p.bearing_std
        )
        return np.vstack([np.zeros((2, 2)), body])

    def fwd_obs(view):
        return np.array([smooth_norm(view.values["rob"] - view.values["obs_pt"])])

    def jac_obs(view):
        d = view.values["rob"] - view.values["obs_pt"]
        return (d / smooth_norm(d)).reshape(1, 2)

    edges = [
        Interconnection(
            "act->rob",
            "act",
            "rob",
            forward=lambda view: view.values["rob"] + view.values["act"],
            jacobian=lambda view: np.eye(2),
        ),
        Interconnection("rob->tar:mu", "rob", "tar", forward=fwd_mu,
                        jacobian=lambda view: jac_mu, apply_forward=True),
        Interconnection("rob->tar:cov", "rob", "tar", forward=fwd_cov, jacobian=jac_cov),
        Interconnection("rob->obs", "rob", "obs_dist", forward=fwd_obs, jacobian=jac_obs),
    ]

    def g1_cost(value, cov=None):
        return nav_goal_g1(value[:2], value[2:].reshape(2, 2))

    def g1_grad(value, cov=None):
        mu = value[:2]
        return np.concatenate([mu / smooth_norm(mu), np.eye(2).reshape(-1)])

    def g2_cost(value, cov=None):
        return nav_goal_g2(float(value[0]), p.sigma_rep)

    def g2_grad(value, cov=None):
        x = float(value[0])
        return np.array([-np.exp(-max(0.0, x) / p.sigma_rep) / p.sigma_rep])

    goals = [
        GoalSpec("g1", "tar", cost=g1_cost, gradient=g1_grad),
        GoalSpec("g2", "obs_dist", cost=g2_cost, gradient=g2_grad),
    ]
    return build_graph(nodes, edges, actuators=["act"], goals=goals)


class NavEnv:
    """Adapter exposing the rollout protocol over `env_step`."""

    sustain = 1

    def __init__(self, world: NavWorld, success_radius: float = SUCCESS_RADIUS):
        self.initial = world
        self.world = world
        self.success_radius = success_radius
        self.collided = False
        self.rng: Optional[np.random.Generator] = None

    def reset(self, rng: np.random.Generator) -> dict:
        self.rng = rng
        self.world = self.initial
        self.collided = False
        return self._measure(self.world.agent, *self._sense(self.world.agent))

    def step(self, action: np.ndarray, dt: float) -> dict:
        self.world, z_tar, z_obs, collided = env_step(self.world, action[:2], dt, self.rng)
        self.collided = self.collided or collided
        return self._measure(self.world.agent, z_tar, z_obs)

    def _sense(self, agent: np.ndarray) -> tuple[float, float]:
        rel = self.world.target - agent
        z_tar = float(np.arctan2(rel[1], rel[0]))
        _, z_obs = nearest_obstacle(agent, self.world.obstacles)
        if self.rng is not None:
            if self.world.bearing_noise > 0.0:
                z_tar = wrap_angle(z_tar + self.rng.normal(0.0, self.world.bearing_noise))
            if self.world.range_noise > 0.0:
                z_obs = max(0.0, z_obs + self.rng.normal(0.0, self.world.range_noise))
        return z_tar, z_obs

    def _measure(self, agent: np.ndarray, z_tar: float, z_obs: float) -> dict:
        pt, d = nearest_obstacle(agent, self.world.obstacles)
        direction = (agent - pt) / max(d, 1e-9)
        return {
            "rob": agent.copy(),
            "tar_abs": z_tar,
            "obs_dist": np.array([z_obs]),
            "obs_pt": agent - direction * z_obs,
        }

    def observe(self) -> dict[str, float]:
        a, t = self.world.agent, self.world.target
        return {
            "agent_x": float(a[0]),
            "agent_y": float(a[1]),
            "target_x": float(t[0]),
            "target_y": float(t[1]),
            "dist_to_target": float(np.hypot(*(t - a))),
            "clearance": float(nearest_obstacle(a, self.world.obstacles)[1]),
            "collided": float(self.collided),
        }

    def succeeded(self) -> bool:
        return float(np.hypot(*(self.world.target - self.world.agent))) < self.success_radius

    def failed(self) -> bool:
        return self.collided


def u_trap_obstacle(
    center=(5.5, 5.0),
    width=4.0,
    height=3.0,
    thickness=1.0,
    opening="left",
    arm_extension=0.6,
) -> np.ndarray:
    """Single simple polygon forming a U whose cavity faces the opening side.

    One arm extends `arm_extension` past the other so no approach line sees
    both mouth corners at equal range (a range sensor would flicker there).
    """
    cx, cy = center
    w2, h2 = width / 2.0, height / 2.0
    t = thickness
    e = arm_extension
    # Cavity opens toward -x; other orientations rotate the vertex list.
    poly = np.array(
        [
            [cx - w2 - e, cy - h2],
            [cx + w2, cy - h2],
            [cx + w2, cy + h2],
            [cx - w2, cy + h2],
            [cx - w2, cy + h2 - t],
            [cx + w2 - t, cy + h2 - t],
            [cx + w2 - t, cy - h2 + t],
            [cx - w2 - e, cy - h2 + t],
        ]
    )
    rotations = {"left": 0.0, "down": np.pi / 2, "right": np.pi, "up": -np.pi / 2}
    ang = rotations[opening]
    if ang != 0.0:
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        poly = (poly - (cx, cy)) @ rot.T + (cx, cy)
    return ensure_ccw(poly)


def _in_bounds(p, bounds) -> bool:
    return bounds[0] <= p[0] <= bounds[2] and bounds[1] <= p[1] <= bounds[3]


def _check_simple(poly: np.ndarray) -> None:
    """Reject self-intersecting polygons (non-adjacent edge crossings)."""
    n = poly.shape[0]
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        if np.hypot(*(a2 - a1)) < 1e-12:
            raise DegeneratePolygon("zero-length polygon side")
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = poly[j], poly[(j + 1) % n]
            if _segments_cross(a1, a2, b1, b2):
                raise DegeneratePolygon("polygon is self-intersecting")


def _segments_cross(a1, a2, b1, b2) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    d1 = orient(b1, b2, a1)
    d2 = orient(b1, b2, a2)
    d3 = orient(a1, a2, b1)
    d4 = orient(a1, a2, b2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))
