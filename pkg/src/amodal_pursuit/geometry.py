"""Vectorised 2D primitives shared by the world, sensing and planning code."""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    t = math.fmod(theta, TWO_PI)
    if t <= -math.pi:
        t += TWO_PI
    elif t > math.pi:
        t -= TWO_PI
    return t


def chains_to_segments(chains) -> np.ndarray:
    """Flatten polyline chains into an (M, 4) array of x0, y0, x1, y1 rows."""
    rows = []
    for chain in chains:
        for a, b in zip(chain[:-1], chain[1:]):
            rows.append((a[0], a[1], b[0], b[1]))
    if not rows:
        return np.zeros((0, 4))
    return np.asarray(rows, dtype=np.float64)


def point_segment_distance(px: float, py: float, segs: np.ndarray) -> np.ndarray:
    """Distance from one point to every segment in ``segs``."""
    if len(segs) == 0:
        return np.zeros(0)
    ax, ay, bx, by = segs[:, 0], segs[:, 1], segs[:, 2], segs[:, 3]
    ex, ey = bx - ax, by - ay
    ll = ex * ex + ey * ey
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(ll > 0, ((px - ax) * ex + (py - ay) * ey) / np.where(ll > 0, ll, 1.0), 0.0)
    u = np.clip(u, 0.0, 1.0)
    cx, cy = ax + u * ex - px, ay + u * ey - py
    return np.hypot(cx, cy)


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def segments_intersect(p0, p1, segs: np.ndarray) -> np.ndarray:
    """Boolean mask: does segment p0-p1 properly touch each row of ``segs``."""
    if len(segs) == 0:
        return np.zeros(0, dtype=bool)
    rx, ry = p1[0] - p0[0], p1[1] - p0[1]
    ax, ay = segs[:, 0], segs[:, 1]
    sx, sy = segs[:, 2] - ax, segs[:, 3] - ay
    denom = _cross(rx, ry, sx, sy)
    qpx, qpy = ax - p0[0], ay - p0[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = _cross(qpx, qpy, sx, sy) / denom
        u = _cross(qpx, qpy, rx, ry) / denom
    hit = (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    return hit


def segment_segment_distance(p0, p1, segs: np.ndarray) -> np.ndarray:
    """Minimum distance between segment p0-p1 and each row of ``segs``."""
    if len(segs) == 0:
        return np.zeros(0)
    d = np.minimum(point_segment_distance(p0[0], p0[1], segs),
                   point_segment_distance(p1[0], p1[1], segs))
    d = np.minimum(d, _endpoint_to_segment(segs[:, 0], segs[:, 1], p0, p1))
    d = np.minimum(d, _endpoint_to_segment(segs[:, 2], segs[:, 3], p0, p1))
    d[segments_intersect(p0, p1, segs)] = 0.0
    return d


def _endpoint_to_segment(qx: np.ndarray, qy: np.ndarray, p0, p1) -> np.ndarray:
    ex, ey = p1[0] - p0[0], p1[1] - p0[1]
    ll = ex * ex + ey * ey
    if ll == 0:
        return np.hypot(qx - p0[0], qy - p0[1])
    u = np.clip(((qx - p0[0]) * ex + (qy - p0[1]) * ey) / ll, 0.0, 1.0)
    return np.hypot(p0[0] + u * ex - qx, p0[1] + u * ey - qy)


def ray_segments(ox: float, oy: float, dirs: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Distance along each unit ray (rows of ``dirs``) to the nearest segment.

    Returns ``inf`` where a ray misses everything.
    """
    n = len(dirs)
    if len(segs) == 0:
        return np.full(n, np.inf)
    dx, dy = dirs[:, 0:1], dirs[:, 1:2]
    ax, ay = segs[None, :, 0], segs[None, :, 1]
    ex, ey = segs[None, :, 2] - ax, segs[None, :, 3] - ay
    denom = dx * ey - dy * ex
    qx, qy = ax - ox, ay - oy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (qx * ey - qy * ex) / denom
        u = (qx * dy - qy * dx) / denom
    ok = (denom != 0) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    t = np.where(ok, t, np.inf)
    return t.min(axis=1)


def ray_circles(ox: float, oy: float, dirs: np.ndarray, centers: np.ndarray,
                radii: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to its first hit among the given discs.

    A ray starting inside a disc reports the exit distance.
    """
    n = len(dirs)
    if len(centers) == 0:
        return np.full(n, np.inf)
    fx = ox - centers[None, :, 0]
    fy = oy - centers[None, :, 1]
    b = dirs[:, 0:1] * fx + dirs[:, 1:2] * fy
    c = fx * fx + fy * fy - radii[None, :] ** 2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        root = np.sqrt(np.where(disc >= 0, disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    t = np.where(t_near > 1e-12, t_near, np.where(t_far > 1e-12, t_far, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    return t.min(axis=1)


def unit_dirs(angles: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)
