"""Conflict resolution between gradients sharing a quantity.

Candidate gradients at one quantity are ranked greedily: the steepest
(softmax-normalized) gradient goes first, every later candidate is measured
after projection into the nullspace of all gradients ranked above it. A
hysteresis margin keeps the previous tick's ranking unless a challenger
clearly beats the incumbent, which suppresses priority chatter when
magnitudes are close. The projected survivors are mutually orthogonal, so
their sum descends every selected objective without worsening a higher
ranked one to first order.

Scalar goals make the nullspace projector of a gradient g simply
I - v v^T with v = g/||g||; the pseudoinverse and QR constructions reduce
to the same matrix and are kept only as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateGradient, EmptyInput

EPS_PROJ = 1e-10
DEFAULT_TAU = 0.8
DEFAULT_MARGIN = 0.10

SOFTMAX_ORDERING_ONLY = "ordering-only"
SOFTMAX_ORDERING_AND_SCALING = "ordering-and-scaling"


@dataclass
class Projector:
    """Orthogonal projector onto the complement of one direction."""

    matrix: np.ndarray

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def projector_from(vector: np.ndarray, eps: float = EPS_PROJ) -> Projector:
    """I - v v^T for the normalized input direction."""
    vector = np.asarray(vector, dtype=float).reshape(-1)
    norm = float(np.linalg.norm(vector))
    if norm <= eps:
        raise DegenerateGradient(f"cannot build projector from norm {norm:.3e}")
    v = vector / norm
    return Projector(np.eye(vector.size) - np.outer(v, v))


def normalize_magnitudes(magnitudes: Sequence[float], tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax of magnitudes/tau; order-preserving, sums to one."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    m = np.asarray(magnitudes, dtype=float)
    if m.size == 0:
        raise EmptyInput("no magnitudes to normalize")
    if not np.all(np.isfinite(m)) or np.any(m < 0.0):
        raise ValueError("magnitudes must be finite and non-negative")
    z = m / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class ResolvedSet:
    """Outcome of ordering and projecting the candidates at one quantity."""

    ordered: list[tuple[str, np.ndarray]]
    combined: np.ndarray
    priority_ids: list[str]
    weights: dict[str, float] = field(default_factory=dict)
    raw_vectors: dict[str, np.ndarray] = field(default_factory=dict)
    raw_magnitudes: dict[str, float] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)


def order_and_project(
    gradients: Sequence[tuple[str, np.ndarray]],
    previous_order: Optional[Sequence[str]] = None,
    margin: float = DEFAULT_MARGIN,
    tau: float = DEFAULT_TAU,
    eps_proj: float = EPS_PROJ,
    softmax_mode: str = SOFTMAX_ORDERING_ONLY,
) -> ResolvedSet:
    """Rank gradients and project each into the nullspace of its seniors.

    Selection at each rank is by softmax-normalized projected magnitude; the
    id holding that rank on the previous tick keeps it unless a challenger's
    weight exceeds the incumbent's by more than `margin`. Selection stops
    once the best remaining projected magnitude falls below `eps_proj` or
    the quantity's degrees of freedom are exhausted.

    With `softmax_mode="ordering-and-scaling"` each selected direction is
    rescaled to its softmax weight relative to the top pick, which bounds
    the combined step and decouples it from cost parametrization; the
    default keeps the raw projected vectors and sums them.
    """
    if margin < 0.0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    items = [(str(gid), np.asarray(vec, dtype=float).reshape(-1)) for gid, vec in gradients]
    if not items:
        raise EmptyInput("order_and_project needs at least one gradient")
    dim = items[0][1].size
    for gid, vec in items:
        if vec.size != dim:
            raise ValueError(f"gradient {gid!r} has dim {vec.size}, expected {dim}")

    previous_order = list(previous_order or ())
    resolved = ResolvedSet(ordered=[], combined=np.zeros(dim), priority_ids=[])
    for gid, vec in items:
        resolved.raw_vectors[gid] = vec
        resolved.raw_magnitudes[gid] = float(np.linalg.norm(vec))

    remaining = {gid: vec.copy() for gid, vec in items}
    accum = np.eye(dim)
    top_magnitude = None
    rank = 0
    while remaining and rank < dim:
        projected = {gid: accum @ vec for gid, vec in remaining.items()}
        mags = {gid: float(np.linalg.norm(v)) for gid, v in projected.items()}
        ids = sorted(projected)
        weights = normalize_magnitudes([mags[g] for g in ids], tau)
        weight_of = dict(zip(ids, weights))

        best = min(ids, key=lambda g: (-mags[g], g))
        if mags[best] <= eps_proj:
            resolved.dropped.extend(sorted(remaining))
            break
        pick = best
        if rank < len(previous_order):
            incumbent = previous_order[rank]
            if incumbent in remaining and mags[incumbent] > eps_proj:
                if weight_of[best] <= (1.0 + margin) * weight_of[incumbent]:
                    pick = incumbent

        vec = projected[pick]
        mag = mags[pick]
        if top_magnitude is None:
            top_magnitude = mag
        if softmax_mode == SOFTMAX_ORDERING_AND_SCALING:
            scaled = weight_of[pick] * vec / top_magnitude
        else:
            scaled = vec
        resolved.ordered.append((pick, scaled))
        resolved.priority_ids.append(pick)
        resolved.weights[pick] = float(weight_of[pick])
        resolved.combined = resolved.combined + scaled
        accum = (np.eye(dim) - np.outer(vec / mag, vec / mag)) @ accum
        del remaining[pick]
        rank += 1
    else:
        resolved.dropped.extend(sorted(remaining))
    return resolved


def combine(resolved: ResolvedSet) -> np.ndarray:
    """Conflict-free sum of the projected (and possibly rescaled) gradients."""
    return resolved.combined
