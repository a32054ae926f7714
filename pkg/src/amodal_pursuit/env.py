"""Gym-style pursuit episode: sense -> detect -> track -> select target -> act -> step."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import OccupancyGrid, nearest_free, passive_policy, random_policy, shortest_path_policy
from .detection import OracleConfig, Tracker, detect, select_target, tick_rng
from .errors import FormatError, PlanningError
from .policy import (
    ActionSpace,
    PolicyConfig,
    PolicyParams,
    RewardConfig,
    RewardContext,
    forward,
    goal_polar,
    reward_terms,
    sample_action,
    softmax,
)
from .sensing import CameraConfig, LidarConfig, LidarStack, SegMask, raycast_lidar, render_mask, stack_masks
from .world import Scenario, Velocity, WorldState, step_world


@dataclass(frozen=True)
class EnvConfig:
    oracle: OracleConfig = OracleConfig()
    reward: RewardConfig = RewardConfig()
    lidar: LidarConfig = LidarConfig()
    camera: CameraConfig = CameraConfig()
    policy: PolicyConfig = PolicyConfig()
    actions: ActionSpace = ActionSpace()
    gating_radius: float = 1.0
    max_misses: int = 10
    stop_on_arrival: bool = True


@dataclass
class Transition:
    tick: int
    action: int | None
    velocity: tuple
    reward: float
    done: bool
    pursuing: bool
    p_t: float | None
    p_prev: float | None
    terms: dict = field(default_factory=dict)


@dataclass
class EpisodeLog:
    """Everything the metrics need, in JSON-friendly form."""

    scenario_seed: int
    episode_seed: int
    policy: str
    classes: dict                # human id -> true class
    ticks: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    terminal: str = "horizon"
    pursuit: dict | None = None  # {"start_tick", "track_id", "human_id"}

    @property
    def total_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    @property
    def collided(self) -> bool:
        return self.terminal == "collision"

    def to_jsonl(self) -> str:
        head = {"kind": "episode", "scenario_seed": self.scenario_seed, "episode_seed": self.episode_seed,
                "policy": self.policy, "classes": {str(k): v for k, v in self.classes.items()},
                "terminal": self.terminal, "pursuit": self.pursuit}
        lines = [json.dumps(head, sort_keys=True)]
        by_tick = {t.tick: t for t in self.transitions}
        for rec in self.ticks:
            row = dict(rec)
            row["kind"] = "tick"
            tr = by_tick.get(rec["tick"])
            if tr is not None:
                row["transition"] = {"action": tr.action, "velocity": list(tr.velocity), "reward": tr.reward,
                                     "done": tr.done, "pursuing": tr.pursuing, "p_t": tr.p_t,
                                     "p_prev": tr.p_prev, "terms": tr.terms}
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> list["EpisodeLog"]:
        logs = []
        cur = None
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"log line {n}: {exc}") from exc
            if row.get("kind") == "episode":
                cur = cls(row["scenario_seed"], row["episode_seed"], row["policy"],
                          {int(k): v for k, v in row["classes"].items()}, terminal=row["terminal"],
                          pursuit=row["pursuit"])
                logs.append(cur)
            elif row.get("kind") == "tick" and cur is not None:
                tr = row.pop("transition", None)
                row.pop("kind")
                cur.ticks.append(row)
                if tr is not None:
                    cur.transitions.append(Transition(row["tick"], tr["action"], tuple(tr["velocity"]), tr["reward"],
                                                      tr["done"], tr["pursuing"], tr["p_t"], tr["p_prev"], tr["terms"]))
            else:
                raise FormatError(f"log line {n}: unexpected record")
        return logs


class PursuitEnv:
    def __init__(self, scenario: Scenario, cfg: EnvConfig = EnvConfig(), episode_seed: int = 0,
                 horizon: int | None = None):
        self.scenario = scenario
        self.cfg = cfg
        self.episode_seed = episode_seed
        self.horizon = horizon if horizon is not None else scenario.duration
        self.dt = scenario.dt
        self._grid = None

    @property
    def grid(self) -> OccupancyGrid:
        if self._grid is None:
            self._grid = OccupancyGrid.from_segments(self.scenario.segments, self.scenario.bounds, 0.1,
                                                     self.scenario.robot_radius)
        return self._grid

    def reset(self) -> dict:
        self.state = WorldState.from_scenario(self.scenario)
        self.tracker = Tracker(self.cfg.gating_radius, self.cfg.max_misses)
        self.lidar = LidarStack()
        self.masks = deque(maxlen=self.cfg.policy.mask_history)
        self.target_track = None
        self.target_human = None
        self.pursuit = None
        self.p_prev = None
        self.finished = False
        self.first_seen = set()
        self.ticks = []
        self._sense()
        self._maybe_lock()
        self._record_tick(None)
        return self.observation()

    def _sense(self):
        pose = self.state.robot.pose
        self.lidar.push(raycast_lidar(self.state, pose, self.cfg.lidar))
        fresh = {h.id for h in self.state.humans} - self.first_seen
        self.detections = detect(self.state, pose, self.cfg.oracle, tick_rng(self.episode_seed, self.state.tick),
                                 self.cfg.camera, with_iou_for=fresh,
                                 iou_resolution=self.cfg.policy.mask_resolution, noise_seed=self.episode_seed)
        for d in self.detections:
            self.first_seen.add(d.human_id)
        self.tracker.update(self.detections)

    def _target_detection(self):
        if self.target_track is None:
            return None
        track = self.tracker.get(self.target_track)
        if track is None or track.latest.tick != self.state.tick:
            return None
        return track.latest

    def _maybe_lock(self):
        if self.pursuit is not None:
            return
        tgt = select_target(self.detections, self.tracker.tracks, self.cfg.oracle.lam)
        if tgt is None:
            return
        self.target_track = tgt.track_id
        self.target_human = tgt.history[0].human_id
        self.pursuit = {"start_tick": self.state.tick, "track_id": tgt.track_id, "human_id": self.target_human}
        self.p_prev = tgt.confidence if tgt.latest.tick == self.state.tick else 0.0
        self.masks.clear()
        self._push_mask()

    def _push_mask(self):
        det = self._target_detection()
        res = self.cfg.policy.mask_resolution
        if det is None:
            self.masks.append(SegMask(np.zeros((res, res), dtype=np.uint8), -1, self.state.tick))
        else:
            human = self.state.human(det.human_id)
            self.masks.append(render_mask(human, self.state.robot.pose, self.state, res, self.cfg.camera))

    def goal_xy(self):
        if self.target_track is None:
            return None
        track = self.tracker.get(self.target_track)
        if track is None:
            return None
        return (track.est_pose.x, track.est_pose.y)

    def observation(self) -> dict:
        r = self.state.robot
        res = self.cfg.policy.mask_resolution
        return {
            "masks": stack_masks(self.masks, self.cfg.policy.mask_history, res),
            "lidar": self.lidar.as_array(),
            "v_prev": np.array([r.velocity.v, r.velocity.w]),
            "goal": np.array(goal_polar(r.pose, self.goal_xy())),
        }

    @property
    def pursuing(self) -> bool:
        return self.target_track is not None and self.tracker.get(self.target_track) is not None

    def step(self, action) -> tuple[dict, float, bool, dict]:
        index = None
        if not isinstance(action, Velocity):
            index = int(action)
            action = self.cfg.actions.velocity(index)
        pursuing = self.pursuing and not self.finished
        goal_before = self.goal_xy()
        pose = self.state.robot.pose
        d_prev = math.hypot(goal_before[0] - pose.x, goal_before[1] - pose.y) if goal_before else None

        self.state, collided = step_world(self.state, action, self.dt)
        self._sense()

        p_t = None
        arrived = False
        d_t = None
        if pursuing:
            still = self.tracker.get(self.target_track) is not None
            det = self._target_detection()
            p_t = det.confidence if det is not None else 0.0
            arrived = det is not None and p_t >= self.cfg.oracle.lam
            g = self.goal_xy() if still else goal_before
            rp = self.state.robot.pose
            d_t = math.hypot(g[0] - rp.x, g[1] - rp.y)
            self._push_mask()
        ctx = RewardContext(collided, self.state.robot.velocity.w, pursuing, p_t, self.p_prev, arrived, d_prev, d_t)
        terms = reward_terms(ctx, self.cfg.reward)
        r = terms["r_c"] + terms["r_w"] + terms["r_h"] + terms["shaping"]
        p_prev_used = self.p_prev
        if pursuing:
            self.p_prev = p_t
        if self.pursuit is None:
            self._maybe_lock()
        cause = None
        if collided:
            cause = "collision"
        elif arrived:
            cause = "arrival"
        elif self.state.tick >= self.horizon:
            cause = "horizon"
        done = cause is not None and (cause != "arrival" or self.cfg.stop_on_arrival)
        if arrived:
            self.finished = True
        tr = Transition(self.state.tick, index, (action.clamped().v, action.clamped().w), r, done,
                        pursuing, p_t, p_prev_used, terms)
        self._record_tick(tr)
        return self.observation(), r, done, {"cause": cause, "transition": tr, "collided": collided,
                                             "arrived": arrived}

    def step_parked(self) -> None:
        """Advance the world with the robot held still; used to keep measuring after arrival."""
        self.state, _ = step_world(self.state, Velocity(0.0, 0.0), self.dt)
        self._sense()
        self._record_tick(None)

    def _record_tick(self, tr):
        r = self.state.robot
        self.ticks.append({
            "tick": self.state.tick,
            "robot": [r.pose.x, r.pose.y, r.pose.theta],
            "pursuing": self.pursuing,
            "target_human": self.target_human,
            "detections": [d.to_dict() for d in self.detections],
        })


# ---- policies: callables (obs, env, rng) -> action index or Velocity ----

class LearnedPolicy:
    name = "learned"

    def __init__(self, params: PolicyParams, greedy: bool = False):
        self.params = params
        self.leaves = params.leaves()
        self.greedy = greedy

    def probs(self, obs: dict) -> np.ndarray:
        logits, _ = forward(obs, self.leaves, self.params.config)
        return softmax(logits.data)[0]

    def __call__(self, obs, env, rng):
        p = self.probs(obs)
        if self.greedy:
            return int(np.argmax(p))
        return sample_action(p, rng)


class PassivePolicy:
    name = "passive"

    def __call__(self, obs, env, rng):
        return passive_policy()


class RandomPolicy:
    name = "random"

    def __call__(self, obs, env, rng):
        return random_policy(rng, env.cfg.actions)


class ShortestPathPolicy:
    """A* on the static grid plus the humans currently detected (other than the target)."""

    name = "shortest"

    def __init__(self, standoff: float = 1.0, avoid_detected: bool = True):
        self.standoff = standoff
        self.avoid_detected = avoid_detected

    def __call__(self, obs, env, rng):
        goal = env.goal_xy()
        if goal is None:
            return Velocity(0.0, 0.0)
        grid = env.grid
        if self.avoid_detected:
            discs = []
            for d in env.detections:
                if d.human_id == env.target_human:
                    continue
                discs.append((d.position[0], d.position[1], env.state.human(d.human_id).body_radius))
            if discs:
                grid = grid.with_discs(discs, env.scenario.robot_radius)
        robot = env.state.robot
        try:
            return shortest_path_policy(grid, robot, goal, standoff=self.standoff)
        except PlanningError:
            p = robot.pose
            alt = nearest_free(grid, grid.cell_of(p.x, p.y), 5)
            if alt is None:
                return Velocity(0.0, 1.0)
            ax, ay = grid.center_of(alt)
            shifted = replace(robot, pose=replace(p, x=ax, y=ay))
            return shortest_path_policy(grid, shifted, goal, standoff=self.standoff)


def make_policy(kind: str, params: PolicyParams | None = None):
    if kind == "passive":
        return PassivePolicy()
    if kind == "random":
        return RandomPolicy()
    if kind == "shortest":
        return ShortestPathPolicy()
    if kind == "learned":
        if params is None:
            raise ValueError("learned policy needs parameters")
        return LearnedPolicy(params)
    raise ValueError(f"unknown policy {kind!r}")


def rollout(scenario: Scenario, policy, cfg: EnvConfig = EnvConfig(), horizon: int | None = None,
            seed: int = 0, measure_until: int | None = None, keep_obs: bool = False):
    """Run one episode. Returns the log (and the observation list when ``keep_obs``).

    When the episode stops (for any reason) before ``measure_until``, the world
    keeps running with the robot parked so later detections are still logged.
    """
    env = PursuitEnv(scenario, cfg, seed, horizon)
    rng = np.random.default_rng([seed, 0xAC7])
    obs = env.reset()
    log = EpisodeLog(scenario.rng_seed, seed, getattr(policy, "name", "custom"),
                     {h.id: h.true_class for h in scenario.humans})
    observations = [obs] if keep_obs else None
    done = False
    cause = "horizon"
    while not done:
        action = policy(obs, env, rng)
        obs, _, done, info = env.step(action)
        log.transitions.append(info["transition"])
        if keep_obs:
            observations.append(obs)
        if done:
            cause = info["cause"] or "horizon"
    if measure_until is not None:
        while env.state.tick < measure_until:
            env.step_parked()
    log.ticks = env.ticks
    log.terminal = cause
    log.pursuit = env.pursuit
    return (log, observations) if keep_obs else log
