"""Lidar raycasting, visibility sampling and mask rasterisation from the robot's viewpoint."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import normalize_angle, ray_circles, ray_segments, unit_dirs
from .world import HumanAgent, Pose2D, WorldState


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 180
    fov: float = math.radians(240.0)
    max_range: float = 6.0

    def angles(self) -> np.ndarray:
        if self.beams == 1:
            return np.zeros(1)
        return np.linspace(-self.fov / 2, self.fov / 2, self.beams)


@dataclass(frozen=True)
class CameraConfig:
    fov: float = math.radians(90.0)
    vfov: float = math.radians(90.0)
    max_range: float = 8.0
    resolution: int = 244
    camera_height: float = 1.0
    human_height: float = 1.7

    def column_bearings(self, resolution: int | None = None) -> np.ndarray:
        """Bearing of every raster column relative to the heading, left (+) to right (-)."""
        res = resolution or self.resolution
        return self.fov / 2 - (np.arange(res) + 0.5) * self.fov / res


@dataclass(frozen=True)
class LidarScan:
    beam_angles: np.ndarray
    ranges: np.ndarray
    max_range: float
    tick: int


class LidarStack:
    """The three most recent scans, oldest first. Padded by repetition at episode start."""

    depth = 3

    def __init__(self, scans=None):
        self.scans: list[LidarScan] = list(scans or [])

    def push(self, scan: LidarScan) -> None:
        if not self.scans:
            self.scans = [LidarScan(scan.beam_angles, scan.ranges, scan.max_range, scan.tick - k)
                          for k in range(self.depth - 1, 0, -1)]
        self.scans.append(scan)
        self.scans = self.scans[-self.depth:]

    def as_array(self) -> np.ndarray:
        return np.stack([s.ranges for s in self.scans])


@dataclass(frozen=True)
class SegMask:
    values: np.ndarray
    human_id: int
    tick: int

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def pixel_count(self) -> int:
        return int(self.values.sum())


def stack_masks(history, depth: int, resolution: int) -> np.ndarray:
    """Channel-stack the last ``depth`` masks (oldest first), zero-padded in front."""
    out = np.zeros((depth, resolution, resolution), dtype=np.float64)
    recent = list(history)[-depth:]
    for k, m in enumerate(recent):
        out[depth - len(recent) + k] = m.values
    return out


def _bodies(state: WorldState, exclude: int | None = None):
    hs = [h for h in state.humans if h.id != exclude]
    if not hs:
        return np.zeros((0, 2)), np.zeros(0)
    return (np.array([[h.pose.x, h.pose.y] for h in hs]),
            np.array([h.body_radius for h in hs]))


def raycast_lidar(state: WorldState, pose: Pose2D, cfg: LidarConfig = LidarConfig()) -> LidarScan:
    """Nearest hit per beam over walls and human discs, capped at ``max_range``."""
    angles = cfg.angles()
    dirs = unit_dirs(angles + pose.theta)
    t = ray_segments(pose.x, pose.y, dirs, state.segments)
    centers, radii = _bodies(state)
    t = np.minimum(t, ray_circles(pose.x, pose.y, dirs, centers, radii))
    ranges = np.minimum(t, cfg.max_range)
    return LidarScan(angles, ranges, cfg.max_range, state.tick)


def _visible_along(human: HumanAgent, pose: Pose2D, state: WorldState, rel_bearings: np.ndarray,
                   cam: CameraConfig, occluders: bool = True):
    """Per-bearing (hit, visible, distance) for rays cast at the target disc."""
    dirs = unit_dirs(rel_bearings + pose.theta)
    center = np.array([[human.pose.x, human.pose.y]])
    t_target = ray_circles(pose.x, pose.y, dirs, center, np.array([human.body_radius]))
    hit = np.isfinite(t_target) & (t_target <= cam.max_range)
    hit &= np.abs(rel_bearings) <= cam.fov / 2 + 1e-12
    if occluders:
        t_occ = ray_segments(pose.x, pose.y, dirs, state.segments)
        c, r = _bodies(state, exclude=human.id)
        t_occ = np.minimum(t_occ, ray_circles(pose.x, pose.y, dirs, c, r))
        visible = hit & (t_target < t_occ)
    else:
        visible = hit
    return hit, visible, t_target


def visible_fraction(human: HumanAgent, pose: Pose2D, state: WorldState, samples: int = 32,
                     cam: CameraConfig = CameraConfig(), bearings: np.ndarray | None = None) -> float:
    """Share of sight lines to the disc that reach it unobstructed.

    By default ``samples`` bearings are spread uniformly over the disc's
    angular extent, so each one lands on a distinct point of the silhouette.
    Passing ``bearings`` (relative to the heading) uses those rays instead,
    counting only the ones that hit the disc.
    """
    if bearings is None:
        if samples < 8:
            raise ValueError("samples must be >= 8")
        dx, dy = human.pose.x - pose.x, human.pose.y - pose.y
        d = math.hypot(dx, dy)
        if d <= human.body_radius:
            return 1.0
        half = math.asin(human.body_radius / d)
        centre = normalize_angle(math.atan2(dy, dx) - pose.theta)
        offsets = -half + (np.arange(samples) + 0.5) * (2 * half / samples)
        rel = np.array([normalize_angle(centre + o) for o in offsets])
        _, visible, t = _visible_along(human, pose, state, rel, cam)
        # samples outside the cone or range never count as visible
        return float(visible.sum()) / samples
    hit, visible, _ = _visible_along(human, pose, state, np.asarray(bearings, dtype=np.float64), cam)
    n = int(hit.sum())
    return float(visible.sum()) / n if n else 0.0


def render_mask(human: HumanAgent, pose: Pose2D, state: WorldState, resolution: int | None = None,
                cam: CameraConfig = CameraConfig(), amodal: bool = False) -> SegMask:
    """Rasterise the human's silhouette in an angular viewport.

    Columns are bearings across the camera cone, rows are elevation angles.
    The modal mask keeps only columns whose ray reaches the human before any
    wall or other body; ``amodal=True`` ignores occluders.
    """
    res = resolution or cam.resolution
    if res < 16:
        raise ValueError("mask resolution must be >= 16")
    rel = cam.column_bearings(res)
    _, visible, t = _visible_along(human, pose, state, rel, cam, occluders=not amodal)
    values = np.zeros((res, res), dtype=np.uint8)
    cols = np.nonzero(visible)[0]
    if len(cols):
        elev = cam.vfov / 2 - (np.arange(res) + 0.5) * cam.vfov / res
        top = np.arctan2(cam.human_height - cam.camera_height, t[cols])
        bottom = np.arctan2(-cam.camera_height, t[cols])
        filled = (elev[:, None] <= top[None, :]) & (elev[:, None] >= bottom[None, :])
        values[:, cols] = filled.astype(np.uint8)
    return SegMask(values, human.id, state.tick)


def mask_bbox(mask: SegMask):
    """Pixel bounding box (xmin, ymin, xmax, ymax) of a non-empty mask, else None."""
    ys, xs = np.nonzero(mask.values)
    if len(xs) == 0:
        return None
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def write_pgm(mask: SegMask, path) -> None:
    h, w = mask.values.shape
    body = (mask.values * 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + body)


def write_scan_csv(scans, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tick", "beam", "angle", "range"])
        for s in scans:
            for i, (a, r) in enumerate(zip(s.beam_angles, s.ranges)):
                wr.writerow([s.tick, i, f"{a:.6f}", f"{r:.6f}"])
