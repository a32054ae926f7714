"""Independent reference computations used by the tests.

Nothing here imports the package: each function re-derives its value from
first principles (closed-form geometry, brute force, or a third-party solver).
"""

import math

import numpy as np


def ray_hits_vertical_wall(ox, oy, heading, wall_x, half_len):
    """Distance along a ray to the segment x = wall_x, |y| <= half_len."""
    c, s = math.cos(heading), math.sin(heading)
    if abs(c) < 1e-15:
        return math.inf
    t = (wall_x - ox) / c
    if t <= 0:
        return math.inf
    y = oy + t * s
    return t if abs(y) <= half_len else math.inf


def ray_hits_circle(ox, oy, heading, cx, cy, r):
    """Nearest positive root of |o + t d - c| = r."""
    dx, dy = math.cos(heading), math.sin(heading)
    fx, fy = ox - cx, oy - cy
    b = fx * dx + fy * dy
    c = fx * fx + fy * fy - r * r
    disc = b * b - c
    if disc < 0:
        return math.inf
    for t in (-b - math.sqrt(disc), -b + math.sqrt(disc)):
        if t > 0:
            return t
    return math.inf


def rect_mask(shape, x0, y0, w, h):
    m = np.zeros(shape, dtype=np.uint8)
    m[y0:y0 + h, x0:x0 + w] = 1
    return m


def rect_iou(a, b):
    """IoU of axis-aligned (x, y, w, h) rectangles by interval arithmetic."""
    ix = max(0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def dijkstra_grid_cost(occ, start, goal):
    """Shortest 8-connected path cost via scipy's Dijkstra, no corner cutting."""
    from scipy.sparse import lil_matrix
    from scipy.sparse.csgraph import dijkstra

    ny, nx = occ.shape
    idx = lambda r, c: r * nx + c  # noqa: E731
    g = lil_matrix((ny * nx, ny * nx))
    for r in range(ny):
        for c in range(nx):
            if occ[r, c]:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if not (dr or dc):
                        continue
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < ny and 0 <= cc < nx) or occ[rr, cc]:
                        continue
                    if dr and dc and (occ[r + dr, c] or occ[r, c + dc]):
                        continue
                    g[idx(r, c), idx(rr, cc)] = math.sqrt(2.0) if (dr and dc) else 1.0
    dist = dijkstra(g.tocsr(), directed=True, indices=idx(*start))
    return float(dist[idx(*goal)])


def central_difference(f, x, eps=1e-5):
    return (f(x + eps) - f(x - eps)) / (2 * eps)


def confidence_formula(c_min, c_max, d_max, vis, dist):
    return c_min + (c_max - c_min) * vis * max(0.0, 1.0 - dist / d_max)


def unicycle(x, y, th, v, w, dt):
    return x + v * math.cos(th) * dt, y + v * math.sin(th) * dt, th + w * dt


def greedy_pairs(track_xy, det_xy, gate):
    """Distance-sorted greedy matching by exhaustive listing."""
    cand = []
    for i, t in enumerate(track_xy):
        for j, d in enumerate(det_xy):
            dist = math.dist(t, d)
            if dist <= gate:
                cand.append((dist, i, j))
    cand.sort()
    ti, dj, out = set(), set(), {}
    for _, i, j in cand:
        if i in ti or j in dj:
            continue
        ti.add(i)
        dj.add(j)
        out[i] = j
    return out
