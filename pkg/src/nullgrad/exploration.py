"""Escape from irresolvable gradient conflicts via nullspace motion.

When the two strongest gradients at a quantity are nearly opposed, no
projection can make progress: descending one undoes the other. The
controller then stops pursuing the dominant gradient and instead moves
inside its nullspace, choosing the nullspace direction most consistent
with recent motion (an exponential moving average of the quantity's
per-tick change). Biasing continuation over reversal breaks the left/right
symmetry and prevents oscillation, reproducing wall-following behavior
around non-convex obstacles.

Entry and exit use asymmetric cosine thresholds (hysteresis), and a large
dominance ratio between the top gradient and all others also ends
exploration: at that point ordinary pursuit is unambiguous again.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateGradient
from .resolver import EPS_PROJ, projector_from

PURSUIT = "pursuit"
EXPLORING = "exploring"

DEFAULT_ENTER = -0.6
DEFAULT_EXIT = -0.4
DEFAULT_DOMINANCE = 3.0
DEFAULT_EMA_ALPHA = 0.1
EPS_DIR = 1e-8


@dataclass
class ExplorationState:
    mode: str = PURSUIT
    active_quantity: Optional[str] = None
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    ema_alpha: float = DEFAULT_EMA_ALPHA
    enter_thresh: float = DEFAULT_ENTER
    exit_thresh: float = DEFAULT_EXIT
    dominance: float = DEFAULT_DOMINANCE
    seed: int = 0
    _rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if not self.enter_thresh < self.exit_thresh:
            raise ValueError(
                f"enter threshold {self.enter_thresh} must lie below exit {self.exit_thresh}"
            )
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError(f"ema_alpha must be in (0, 1], got {self.ema_alpha}")
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na <= EPS_PROJ or nb <= EPS_PROJ:
        raise DegenerateGradient("cosine of a near-zero gradient is undefined")
    return float(a @ b) / (na * nb)


def detect_conflict(
    g_top: np.ndarray, g_second: np.ndarray, state: ExplorationState
) -> bool:
    """Is the top pair of gradients in (or still in) structural conflict?

    In pursuit mode a conflict opens when their cosine drops below the
    enter threshold. While exploring, the conflict persists until the
    cosine rises above the exit threshold or the top gradient dominates
    every other by the configured ratio; `g_second` is the largest of the
    others, so it carries that comparison.
    """
    cos = cosine(g_top, g_second)
    if state.mode == PURSUIT:
        return cos < state.enter_thresh
    if cos > state.exit_thresh:
        return False
    top = float(np.linalg.norm(g_top))
    second = float(np.linalg.norm(g_second))
    if top > state.dominance * second:
        return False
    return True


def exploration_direction(
    dominant: np.ndarray, state: ExplorationState, quantity: str
) -> np.ndarray:
    """Unit direction in the dominant gradient's nullspace.

    Prefers the projection of the motion-history EMA; when the EMA has no
    nullspace component the symmetry is broken by a seeded draw (in 2D a
    seeded sign on the perpendicular, which keeps behavior equivariant
    under rigid transforms of the scene).
    """
    proj = projector_from(dominant)
    ema = state.ema.get(quantity)
    if ema is not None:
        candidate = proj(ema)
        norm = float(np.linalg.norm(candidate))
        if norm >= EPS_DIR:
            return candidate / norm
    dim = dominant.reshape(-1).size
    if dim == 2:
        d = dominant / np.linalg.norm(dominant)
        sign = 1.0 if state._rng.random() < 0.5 else -1.0
        return sign * np.array([-d[1], d[0]])
    for _ in range(16):
        candidate = proj(state._rng.standard_normal(dim))
        norm = float(np.linalg.norm(candidate))
        if norm >= EPS_DIR:
            return candidate / norm
    raise DegenerateGradient("could not sample a nullspace direction")


def update_ema(
    state: ExplorationState, quantity: str, step_vector: np.ndarray
) -> ExplorationState:
    """Fold one motion step into the quantity's history EMA."""
    step = np.asarray(step_vector, dtype=float).reshape(-1)
    if not np.all(np.isfinite(step)):
        raise ValueError("step vector must be finite")
    prev = state.ema.get(quantity)
    if prev is None:
        prev = np.zeros_like(step)
    a = state.ema_alpha
    state.ema[quantity] = (1.0 - a) * prev + a * step
    return state
