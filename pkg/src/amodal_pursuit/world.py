"""Deterministic 2D world: unicycle robot, waypoint-following humans, wall segments."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, GenerationError, InvalidStateError
from .geometry import (
    chains_to_segments,
    normalize_angle,
    point_segment_distance,
    segment_segment_distance,
)

V_MIN, V_MAX = 0.0, 1.0
W_MIN, W_MAX = -1.0, 1.0
CAPTURE_RADIUS = 0.3
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise InvalidStateError(f"non-finite pose {self}")
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Velocity:
    v: float = 0.0
    w: float = 0.0

    def clamped(self) -> "Velocity":
        return Velocity(min(max(self.v, V_MIN), V_MAX), min(max(self.w, W_MIN), W_MAX))


@dataclass(frozen=True)
class RobotState:
    pose: Pose2D
    velocity: Velocity = Velocity()
    radius: float = 0.3

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidStateError("robot radius must be positive")


@dataclass(frozen=True)
class HumanAgent:
    id: int
    pose: Pose2D
    body_radius: float = 0.25
    speed: float = 0.0
    waypoints: tuple = ()
    true_class: str = "A"
    wp_index: int = 0

    def __post_init__(self):
        if not self.body_radius > 0:
            raise InvalidStateError(f"human {self.id}: body radius must be positive")
        if self.speed < 0:
            raise InvalidStateError(f"human {self.id}: negative speed")
        object.__setattr__(self, "waypoints", tuple(tuple(map(float, w)) for w in self.waypoints))


@dataclass
class Scenario:
    bounds: tuple[float, float, float, float]
    obstacles: list
    humans: list[HumanAgent]
    robot_start: Pose2D
    rng_seed: int = 0
    duration: int = 20           # control horizon in ticks
    dt: float = 0.1
    classes: tuple = ("A", "B")
    robot_radius: float = 0.3
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidStateError("dt must be positive")

    @property
    def segments(self) -> np.ndarray:
        return chains_to_segments(self.obstacles)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "bounds": list(self.bounds),
            "obstacles": [[list(p) for p in chain] for chain in self.obstacles],
            "humans": [
                {
                    "id": h.id,
                    "pose": [h.pose.x, h.pose.y, h.pose.theta],
                    "body_radius": h.body_radius,
                    "speed": h.speed,
                    "waypoints": [list(w) for w in h.waypoints],
                    "true_class": h.true_class,
                }
                for h in self.humans
            ],
            "robot_start": [self.robot_start.x, self.robot_start.y, self.robot_start.theta],
            "robot_radius": self.robot_radius,
            "rng_seed": self.rng_seed,
            "duration": self.duration,
            "dt": self.dt,
            "classes": list(self.classes),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"unsupported scenario schema_version {d.get('schema_version')!r}")
        try:
            humans = [
                HumanAgent(
                    id=int(h["id"]),
                    pose=Pose2D(*h["pose"]),
                    body_radius=float(h["body_radius"]),
                    speed=float(h["speed"]),
                    waypoints=tuple(tuple(w) for w in h["waypoints"]),
                    true_class=h["true_class"],
                )
                for h in d["humans"]
            ]
            return cls(
                bounds=tuple(d["bounds"]),
                obstacles=[[tuple(p) for p in chain] for chain in d["obstacles"]],
                humans=humans,
                robot_start=Pose2D(*d["robot_start"]),
                rng_seed=int(d["rng_seed"]),
                duration=int(d["duration"]),
                dt=float(d["dt"]),
                classes=tuple(d["classes"]),
                robot_radius=float(d.get("robot_radius", 0.3)),
                meta=dict(d.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed scenario: {exc}") from exc


def save_scenarios(scenarios: list[Scenario], path) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "scenarios": [s.to_dict() for s in scenarios]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_scenarios(path) -> list[Scenario]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return [Scenario.from_dict(s) for s in doc["scenarios"]]


@dataclass(frozen=True)
class WorldState:
    tick: int
    robot: RobotState
    humans: tuple
    segments: np.ndarray = field(compare=False, repr=False)

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "WorldState":
        return cls(0, RobotState(sc.robot_start, Velocity(), sc.robot_radius),
                   tuple(sc.humans), sc.segments)

    def human(self, hid: int) -> HumanAgent:
        for h in self.humans:
            if h.id == hid:
                return h
        raise KeyError(hid)


def step_robot(state: RobotState, action: Velocity, dt: float) -> RobotState:
    """Euler-integrate unicycle kinematics after clamping the command to the bounds box."""
    if not dt > 0:
        raise InvalidStateError("dt must be positive")
    if not (math.isfinite(action.v) and math.isfinite(action.w)):
        raise InvalidStateError(f"non-finite action {action}")
    cmd = action.clamped()
    p = state.pose
    x = p.x + cmd.v * math.cos(p.theta) * dt
    y = p.y + cmd.v * math.sin(p.theta) * dt
    return RobotState(Pose2D(x, y, p.theta + cmd.w * dt), cmd, state.radius)


def step_humans(humans, segments: np.ndarray, dt: float, iterations: int = 10,
                robot: RobotState | None = None) -> list[HumanAgent]:
    """Advance every agent toward its waypoint, then project overlapping bodies apart.

    ``robot`` (its pose before the tick) is an immovable disc the agents step around.
    """
    if not dt > 0:
        raise InvalidStateError("dt must be positive")
    pos = []
    heading = []
    wp_idx = []
    for h in humans:
        x, y, th, idx = h.pose.x, h.pose.y, h.pose.theta, h.wp_index
        if h.waypoints and h.speed > 0:
            wx, wy = h.waypoints[idx]
            dx, dy = wx - x, wy - y
            dist = math.hypot(dx, dy)
            if dist > 0:
                step = min(h.speed * dt, dist)
                x += step * dx / dist
                y += step * dy / dist
                th = math.atan2(dy, dx)
            if math.hypot(wx - x, wy - y) <= CAPTURE_RADIUS and len(h.waypoints) > 1:
                idx = (idx + 1) % len(h.waypoints)
        pos.append([x, y])
        heading.append(th)
        wp_idx.append(idx)
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    radii = np.array([h.body_radius for h in humans])
    n = len(pos)
    for _ in range(iterations):
        moved = False
        for i in range(n):
            for j in range(i + 1, n):
                d = pos[j] - pos[i]
                dist = math.hypot(d[0], d[1])
                need = radii[i] + radii[j]
                if dist >= need:
                    continue
                if dist < 1e-12:
                    u = np.array([1.0, 0.0]) if i < j else np.array([-1.0, 0.0])
                else:
                    u = d / dist
                push = 0.5 * (need - dist) + 1e-9
                pos[i] -= push * u
                pos[j] += push * u
                moved = True
        if robot is not None:
            rp = np.array([robot.pose.x, robot.pose.y])
            for i in range(n):
                d = pos[i] - rp
                dist = math.hypot(d[0], d[1])
                need = radii[i] + robot.radius
                if dist < need:
                    u = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
                    pos[i] = rp + u * (need + 1e-9)
                    moved = True
        for i in range(n):
            if len(segments) == 0:
                break
            dists = point_segment_distance(pos[i, 0], pos[i, 1], segments)
            k = int(np.argmin(dists))
            if dists[k] < radii[i]:
                ax, ay, bx, by = segments[k]
                ex, ey = bx - ax, by - ay
                ll = ex * ex + ey * ey
                u = 0.0 if ll == 0 else min(max(((pos[i, 0] - ax) * ex + (pos[i, 1] - ay) * ey) / ll, 0.0), 1.0)
                cx, cy = ax + u * ex, ay + u * ey
                away = pos[i] - np.array([cx, cy])
                norm = math.hypot(away[0], away[1])
                if norm > 1e-12:
                    pos[i] = np.array([cx, cy]) + away / norm * (radii[i] + 1e-9)
                    moved = True
        if not moved:
            break
    return [
        replace(h, pose=Pose2D(float(pos[i, 0]), float(pos[i, 1]), heading[i]), wp_index=wp_idx[i])
        for i, h in enumerate(humans)
    ]


def check_collision(robot: RobotState, humans, segments: np.ndarray, prev: Pose2D | None = None) -> bool:
    """True iff the robot disc touches a wall or a human.

    With ``prev`` the swept segment from the previous pose is tested too,
    which catches thin walls crossed within one tick.
    """
    x, y, r = robot.pose.x, robot.pose.y, robot.radius
    for h in humans:
        if math.hypot(h.pose.x - x, h.pose.y - y) < r + h.body_radius:
            return True
    if len(segments):
        if prev is not None and (prev.x, prev.y) != (x, y):
            d = segment_segment_distance((prev.x, prev.y), (x, y), segments)
        else:
            d = point_segment_distance(x, y, segments)
        if np.any(d < r):
            return True
    return False


def step_world(state: WorldState, action: Velocity, dt: float) -> tuple[WorldState, bool]:
    robot = step_robot(state.robot, action, dt)
    humans = tuple(step_humans(state.humans, state.segments, dt, robot=state.robot))
    collided = check_collision(robot, humans, state.segments, prev=state.robot.pose)
    return WorldState(state.tick + 1, robot, humans, state.segments), collided


@dataclass
class GeneratorParams:
    width: float = 10.0
    height: float = 8.0
    n_obstacles: int = 3
    n_humans: int = 4
    classes: tuple = ("A", "B")
    layout: str = "occlusion"
    human_radius: float = 0.25
    robot_radius: float = 0.3
    speed_range: tuple = (0.2, 0.5)
    duration: int = 20
    dt: float = 0.1
    max_retries: int = 200

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("classes", "speed_range"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


def _box_chain(w: float, h: float) -> list:
    return [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h), (0.0, 0.0)]


def _clear(x, y, r, segs, bodies, margin=0.05) -> bool:
    if len(segs) and np.any(point_segment_distance(x, y, segs) < r + margin):
        return False
    for bx, by, br in bodies:
        if math.hypot(bx - x, by - y) < r + br + margin:
            return False
    return True


def _random_wall(rng, params, segs, avoid, avoid_r):
    for _ in range(50):
        cx = rng.uniform(1.0, params.width - 1.0)
        cy = rng.uniform(1.0, params.height - 1.0)
        ang = rng.uniform(0, math.pi)
        half = rng.uniform(0.5, 1.2)
        a = (cx - half * math.cos(ang), cy - half * math.sin(ang))
        b = (cx + half * math.cos(ang), cy + half * math.sin(ang))
        seg = np.array([[a[0], a[1], b[0], b[1]]])
        if all(point_segment_distance(px, py, seg)[0] > avoid_r for px, py in avoid):
            return [a, b]
    return None


def _generate_random(params: GeneratorParams, rng: np.random.Generator, seed: int) -> Scenario:
    chains = [_box_chain(params.width, params.height)]
    rx, ry = rng.uniform(1.0, params.width - 1.0), rng.uniform(1.0, params.height - 1.0)
    for _ in range(params.n_obstacles):
        wall = _random_wall(rng, params, chains_to_segments(chains), [(rx, ry)], 1.0)
        if wall is None:
            raise GenerationError("could not place obstacle")
        chains.append(wall)
    segs = chains_to_segments(chains)
    if not _clear(rx, ry, params.robot_radius, segs, []):
        raise GenerationError("robot start blocked")
    bodies = [(rx, ry, params.robot_radius + 0.5)]
    humans = []
    for i in range(params.n_humans):
        humans.append(_place_walker(rng, params, segs, bodies, i, (rx, ry)))
        bodies.append((humans[-1].pose.x, humans[-1].pose.y, params.human_radius))
    robot = Pose2D(rx, ry, rng.uniform(-math.pi, math.pi))
    return Scenario((0.0, 0.0, params.width, params.height), chains, humans, robot, seed,
                    params.duration, params.dt, tuple(params.classes), params.robot_radius,
                    {"layout": "random"})


def _place_walker(rng, params, segs, bodies, hid, robot_xy, forbid=None) -> HumanAgent:
    r = params.human_radius
    for _ in range(params.max_retries):
        x = rng.uniform(r + 0.2, params.width - r - 0.2)
        y = rng.uniform(r + 0.2, params.height - r - 0.2)
        if forbid is not None and forbid(x, y):
            continue
        if not _clear(x, y, r, segs, bodies):
            continue
        wps = [(x, y)]
        for _ in range(params.max_retries):
            wx = rng.uniform(r + 0.3, params.width - r - 0.3)
            wy = rng.uniform(r + 0.3, params.height - r - 0.3)
            if (forbid is None or not forbid(wx, wy)) and _clear(wx, wy, r, segs, []):
                wps.append((wx, wy))
                break
        if len(wps) < 2:
            continue
        speed = rng.uniform(*params.speed_range)
        cls = params.classes[int(rng.integers(len(params.classes)))]
        heading = math.atan2(wps[1][1] - y, wps[1][0] - x)
        return HumanAgent(hid, Pose2D(x, y, heading), r, speed, tuple(wps), cls, wp_index=1)
    raise GenerationError(f"could not place human {hid} after {params.max_retries} tries")


def _generate_occlusion(params: GeneratorParams, rng: np.random.Generator, seed: int) -> Scenario:
    """Robot faces a partially occluded target; occluder is a wall or a standing human."""
    if params.n_humans < 1:
        return _generate_random(params, rng, seed)
    r_h = params.human_radius
    chains = [_box_chain(params.width, params.height)]
    rx = rng.uniform(1.2, 2.2)
    ry = rng.uniform(2.5, params.height - 2.5)
    heading = rng.uniform(-0.25, 0.25)
    dist = rng.uniform(3.0, 4.5)
    bearing = heading + rng.uniform(-0.2, 0.2)
    tx, ty = rx + dist * math.cos(bearing), ry + dist * math.sin(bearing)
    ux, uy = math.cos(bearing), math.sin(bearing)
    nx, ny = -uy, ux
    frac = rng.uniform(0.45, 0.6)
    ox, oy = rx + frac * dist * ux, ry + frac * dist * uy
    side = 1.0 if rng.random() < 0.5 else -1.0
    # projected half-width of the target at the occluder's range
    proj = frac * r_h
    use_human = params.n_humans >= 2 and rng.random() < 0.5
    humans = []
    bodies = [(rx, ry, params.robot_radius + 0.3)]
    cls = params.classes[int(rng.integers(len(params.classes)))]
    tgt_speed = rng.uniform(0.05, 0.25)
    walk = rng.uniform(-1.0, 1.0) * 1.0
    twp = ((tx, ty), (tx + walk * nx + 0.3 * ux, ty + walk * ny + 0.3 * uy))
    target = HumanAgent(0, Pose2D(tx, ty, bearing + math.pi), r_h, tgt_speed, twp, cls, wp_index=1)
    humans.append(target)
    bodies.append((tx, ty, r_h))
    if use_human:
        # occluded share of the target's projected width
        cover = rng.uniform(0.3, 0.8)
        lat = side * (r_h + proj - 2.0 * cover * proj)
        hx, hy = ox + lat * nx, oy + lat * ny
        humans.append(HumanAgent(1, Pose2D(hx, hy, bearing + math.pi), r_h, 0.0,
                                 ((hx, hy), (hx, hy)),
                                 params.classes[int(rng.integers(len(params.classes)))]))
        bodies.append((hx, hy, r_h))
    else:
        edge = side * proj * rng.uniform(-0.6, 0.6)
        length = rng.uniform(1.0, 2.0)
        a = (ox + edge * nx, oy + edge * ny)
        b = (ox + (edge - side * length) * nx, oy + (edge - side * length) * ny)
        chains.append([a, b])
    segs = chains_to_segments(chains)
    for _ in range(max(0, params.n_obstacles - (0 if use_human else 1))):
        wall = _random_wall(rng, params, segs, [(rx, ry), (tx, ty), (ox, oy)], 1.2)
        if wall is None:
            raise GenerationError("could not place obstacle")
        chains.append(wall)
        segs = chains_to_segments(chains)

    def in_view(x, y):
        # keep distractors out of the corridor and the initial camera cone
        rel = math.atan2(y - ry, x - rx) - heading
        rel = normalize_angle(rel)
        return abs(rel) < math.radians(55) or math.hypot(x - rx, y - ry) < 1.2

    for i in range(len(humans), params.n_humans):
        h = _place_walker(rng, params, segs, bodies, i, (rx, ry), forbid=in_view)
        humans.append(h)
        bodies.append((h.pose.x, h.pose.y, r_h))
    if not _clear(rx, ry, params.robot_radius, segs, [(x, y, r) for x, y, r in bodies[1:]]):
        raise GenerationError("robot start blocked")
    for h in humans:
        if not _clear(h.pose.x, h.pose.y, h.body_radius, segs, [], margin=0.0):
            raise GenerationError("human start inside a wall")
    robot = Pose2D(rx, ry, heading)
    meta = {"layout": "occlusion", "occluder": "human" if use_human else "wall", "target_id": 0}
    return Scenario((0.0, 0.0, params.width, params.height), chains, humans, robot, seed,
                    params.duration, params.dt, tuple(params.classes), params.robot_radius, meta)


def generate_scenario(params: GeneratorParams, seed: int) -> Scenario:
    """Build a scenario deterministically from ``(params, seed)``.

    Placement is retried on fresh sub-streams; :class:`GenerationError` after
    ``max_retries`` failures.
    """
    if params.layout not in ("random", "occlusion"):
        raise GenerationError(f"unknown layout {params.layout!r}")
    builder = _generate_occlusion if params.layout == "occlusion" else _generate_random
    last = None
    for attempt in range(params.max_retries):
        rng = np.random.default_rng([seed, attempt])
        try:
            sc = builder(params, rng, seed)
        except GenerationError as exc:
            last = exc
            continue
        if _start_is_valid(sc):
            return sc
    raise GenerationError(f"scenario generation failed for seed {seed}: {last}")


def _start_is_valid(sc: Scenario) -> bool:
    segs = sc.segments
    robot = RobotState(sc.robot_start, Velocity(), sc.robot_radius)
    if check_collision(robot, sc.humans, segs):
        return False
    xmin, ymin, xmax, ymax = sc.bounds
    for h in sc.humans:
        if not (xmin < h.pose.x < xmax and ymin < h.pose.y < ymax):
            return False
    for i, a in enumerate(sc.humans):
        for b in sc.humans[i + 1:]:
            if math.hypot(a.pose.x - b.pose.x, a.pose.y - b.pose.y) < a.body_radius + b.body_radius:
                return False
    return True


def generate_suite(params: GeneratorParams, seeds) -> list[Scenario]:
    return [generate_scenario(params, int(s)) for s in seeds]
