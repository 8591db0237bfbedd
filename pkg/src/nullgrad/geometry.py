"""Planar geometry helpers: polygons, segments, angles.

All polygons are (N, 2) float arrays of vertices. Closed-ring indexing is
implicit (vertex N connects back to vertex 0). Outward normals assume
counter-clockwise vertex order; `ensure_ccw` normalizes orientation.
"""

from __future__ import annotations

import numpy as np

from .errors import DegeneratePolygon


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = (a + np.pi) % (2.0 * np.pi) - np.pi
    if a == -np.pi:
        a = np.pi
    return a


def rot2d(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def cross2(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def ensure_ccw(poly: np.ndarray) -> np.ndarray:
    poly = np.asarray(poly, dtype=float)
    if poly.shape[0] < 3:
        raise DegeneratePolygon(f"polygon needs >= 3 vertices, got {poly.shape[0]}")
    if signed_area(poly) < 0.0:
        poly = poly[::-1].copy()
    return poly


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    """Area centroid via the shoelace formula."""
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    w = x * yn - xn * y
    area = 0.5 * np.sum(w)
    if abs(area) < 1e-15:
        raise DegeneratePolygon("zero-area polygon has no centroid")
    cx = np.sum((x + xn) * w) / (6.0 * area)
    cy = np.sum((y + yn) * w) / (6.0 * area)
    return np.array([cx, cy])


def point_in_polygon(p: np.ndarray, poly: np.ndarray) -> bool:
    """Even-odd rule. Boundary points count as inside."""
    x, y = float(p[0]), float(p[1])
    inside = False
    n = poly.shape[0]
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xi:
                inside = not inside
    return inside


def closest_point_on_segment(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Closest point on segment [a, b] to p.

    Returns (point, t) with t the clamped projection parameter in [0, 1].
    """
    e = b - a
    ee = float(e @ e)
    if ee < 1e-18:
        return a.copy(), 0.0
    t = float((p - a) @ e) / ee
    t = min(1.0, max(0.0, t))
    return a + t * e, t


def closest_point_on_polygon(p: np.ndarray, poly: np.ndarray):
    """Closest boundary point over all sides.

    Returns (point, side_index, distance). Corner ties resolve to the lower
    side index.
    """
    best = None
    n = poly.shape[0]
    for i in range(n):
        c, _ = closest_point_on_segment(p, poly[i], poly[(i + 1) % n])
        d = float(np.hypot(p[0] - c[0], p[1] - c[1]))
        if best is None or d < best[2] - 1e-15:
            best = (c, i, d)
    return best


def polygon_distance(p: np.ndarray, poly: np.ndarray) -> float:
    """Unsigned distance from p to the polygon boundary."""
    return closest_point_on_polygon(p, poly)[2]


def side_outward_normal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Outward unit normal of side a->b of a CCW polygon."""
    e = b - a
    n = np.array([e[1], -e[0]])
    ln = float(np.hypot(n[0], n[1]))
    if ln < 1e-15:
        raise DegeneratePolygon("zero-length polygon side")
    return n / ln


def transform_polygon(poly: np.ndarray, pose: np.ndarray) -> np.ndarray:
    """Apply SE(2) pose (x, y, theta) to local-frame vertices."""
    r = rot2d(float(pose[2]))
    return poly @ r.T + pose[:2]


def smooth_norm(v: np.ndarray, eps: float = 1e-9) -> float:
    """Euclidean norm smoothed at the origin (differentiable everywhere)."""
    return float(np.sqrt(float(v @ v) + eps * eps))
