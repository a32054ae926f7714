"""Non-learned movement policies: passive, uniform random, and A* + pure pursuit."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import PlanningError
from .geometry import normalize_angle
from .policy import ActionSpace
from .world import RobotState, V_MAX, Velocity, W_MAX

SQRT2 = math.sqrt(2.0)
_MOVES = [(-1, -1, SQRT2), (-1, 0, 1.0), (-1, 1, SQRT2), (0, -1, 1.0),
          (0, 1, 1.0), (1, -1, SQRT2), (1, 0, 1.0), (1, 1, SQRT2)]


@dataclass
class OccupancyGrid:
    """Boolean grid indexed [row=y, col=x]; True means occupied."""

    resolution: float
    cells: np.ndarray
    origin: tuple = (0.0, 0.0)

    @classmethod
    def from_segments(cls, segments: np.ndarray, bounds, resolution: float = 0.1,
                      inflation: float = 0.3) -> "OccupancyGrid":
        xmin, ymin, xmax, ymax = bounds
        nx = int(math.ceil((xmax - xmin) / resolution))
        ny = int(math.ceil((ymax - ymin) / resolution))
        cells = np.zeros((ny, nx), dtype=bool)
        if len(segments):
            xs = xmin + (np.arange(nx) + 0.5) * resolution
            ys = ymin + (np.arange(ny) + 0.5) * resolution
            gx, gy = np.meshgrid(xs, ys)
            px, py = gx.ravel(), gy.ravel()
            # half a cell diagonal so every cell the segment passes through is occupied
            reach = inflation + resolution * SQRT2 / 2
            for s in segments:
                ax, ay, bx, by = s
                ex, ey = bx - ax, by - ay
                ll = ex * ex + ey * ey
                u = np.clip(((px - ax) * ex + (py - ay) * ey) / ll, 0, 1) if ll > 0 else np.zeros_like(px)
                d = np.hypot(ax + u * ex - px, ay + u * ey - py)
                cells |= (d <= reach).reshape(ny, nx)
        return cls(resolution, cells, (xmin, ymin))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((y - self.origin[1]) / self.resolution)),
                int(math.floor((x - self.origin[0]) / self.resolution)))

    def center_of(self, cell) -> tuple[float, float]:
        r, c = cell
        return (self.origin[0] + (c + 0.5) * self.resolution, self.origin[1] + (r + 0.5) * self.resolution)

    def inside(self, cell) -> bool:
        return 0 <= cell[0] < self.cells.shape[0] and 0 <= cell[1] < self.cells.shape[1]

    def free(self, cell) -> bool:
        return self.inside(cell) and not self.cells[cell]

    def with_discs(self, discs, inflation: float) -> "OccupancyGrid":
        """Copy with extra circular obstacles ``(x, y, r)`` inflated by ``inflation``."""
        cells = self.cells.copy()
        ny, nx = cells.shape
        for x, y, r in discs:
            reach = r + inflation
            r0, c0 = self.cell_of(x - reach, y - reach)
            r1, c1 = self.cell_of(x + reach, y + reach)
            for rr in range(max(r0, 0), min(r1, ny - 1) + 1):
                for cc in range(max(c0, 0), min(c1, nx - 1) + 1):
                    cx, cy = self.center_of((rr, cc))
                    if math.hypot(cx - x, cy - y) <= reach:
                        cells[rr, cc] = True
        return OccupancyGrid(self.resolution, cells, self.origin)


def astar(grid: OccupancyGrid, start, goal):
    """8-connected A* with the Euclidean heuristic. Returns (cells, cost) or (None, inf).

    Diagonal moves may not cut an occupied corner.
    """
    if not grid.free(start) or not grid.free(goal):
        return None, math.inf
    occ = grid.cells
    ny, nx = occ.shape
    gr, gc = goal

    def h(cell):
        return math.hypot(cell[0] - gr, cell[1] - gc)

    g = {start: 0.0}
    parent = {}
    heap = [(h(start), 0.0, start)]
    closed = set()
    while heap:
        f, cost, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while path[-1] in parent:
                path.append(parent[path[-1]])
            return path[::-1], cost
        closed.add(cur)
        r, c = cur
        for dr, dc, step in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < ny and 0 <= nc < nx) or occ[nr, nc]:
                continue
            if dr and dc and (occ[r + dr, c] or occ[r, c + dc]):
                continue
            ng = cost + step
            nb = (nr, nc)
            if ng < g.get(nb, math.inf):
                g[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + h(nb), ng, nb))
    return None, math.inf


def nearest_free(grid: OccupancyGrid, cell, max_radius: int = 8):
    if grid.free(cell):
        return cell
    best = None
    for rad in range(1, max_radius + 1):
        for dr in range(-rad, rad + 1):
            for dc in range(-rad, rad + 1):
                if max(abs(dr), abs(dc)) != rad:
                    continue
                c = (cell[0] + dr, cell[1] + dc)
                if grid.free(c):
                    d = dr * dr + dc * dc
                    if best is None or d < best[0]:
                        best = (d, c)
        if best is not None:
            return best[1]
    return None


def passive_policy(*_args, **_kwargs) -> Velocity:
    return Velocity(0.0, 0.0)


def random_policy(rng: np.random.Generator, space: ActionSpace = ActionSpace()) -> Velocity:
    return space.velocity(int(rng.integers(space.n)))


def pure_pursuit(robot: RobotState, path_xy, lookahead: float = 0.8) -> Velocity:
    """Steer toward the first path point at least ``lookahead`` away (or the last point)."""
    p = robot.pose
    target = path_xy[-1]
    for pt in path_xy:
        if math.hypot(pt[0] - p.x, pt[1] - p.y) >= lookahead:
            target = pt
            break
    dx, dy = target[0] - p.x, target[1] - p.y
    alpha = normalize_angle(math.atan2(dy, dx) - p.theta)
    if abs(alpha) > math.pi / 2:
        return Velocity(0.0, math.copysign(W_MAX, alpha))
    dist = max(math.hypot(dx, dy), 1e-9)
    curvature = 2.0 * math.sin(alpha) / dist
    v = V_MAX
    w = curvature * v
    if abs(w) > W_MAX:
        # slow down so the turn stays inside the rotational bound
        v = W_MAX / abs(curvature)
        w = math.copysign(W_MAX, w)
    return Velocity(v, w).clamped()


def shortest_path_policy(grid: OccupancyGrid, robot: RobotState, target, standoff: float = 0.0,
                         lookahead: float = 0.8, return_path: bool = False):
    """Replan with A* from the robot cell to ``target`` and follow with pure pursuit.

    Raises :class:`PlanningError` if the robot's own cell is occupied. An
    unreachable target makes the robot rotate in place.
    """
    p = robot.pose
    start = grid.cell_of(p.x, p.y)
    if not grid.free(start):
        raise PlanningError(f"robot cell {start} is occupied or outside the grid")
    tx, ty = target[0], target[1]
    dist = math.hypot(tx - p.x, ty - p.y)
    if dist <= standoff:
        alpha = normalize_angle(math.atan2(ty - p.y, tx - p.x) - p.theta)
        cmd = Velocity(0.0, max(-W_MAX, min(W_MAX, 2.0 * alpha)))
        return (cmd, []) if return_path else cmd
    goal = nearest_free(grid, grid.cell_of(tx, ty))
    path = None
    if goal is not None:
        path, _ = astar(grid, start, goal)
    if path is None:
        cmd = Velocity(0.0, W_MAX)
        return (cmd, []) if return_path else cmd
    pts = [grid.center_of(c) for c in path[1:]] + [(tx, ty)]
    cmd = pure_pursuit(robot, pts, lookahead)
    return (cmd, pts) if return_path else cmd


def write_path_csv(path_xy, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "x", "y"])
        for i, (x, y) in enumerate(path_xy):
            wr.writerow([i, f"{x:.4f}", f"{y:.4f}"])
