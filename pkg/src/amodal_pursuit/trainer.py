"""Actor-critic policy-gradient training with RMSProp."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingDivergedError
from . import autograd as ag
from .policy import PolicyParams, actor_critic_loss, forward, sample_action, softmax
from .world import (
    GeneratorParams,
    Pose2D,
    RobotState,
    Velocity,
    WorldState,
    generate_scenario,
    step_robot,
)
from .geometry import chains_to_segments, normalize_angle
from .sensing import LidarConfig, LidarStack, raycast_lidar

log = logging.getLogger(__name__)

# iteration key reserved for evaluation episodes, outside any training run
EVAL_ITERATION = 1 << 30


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 4e-5
    eps: float = 5e-5
    alpha: float = 0.99
    grad_clip: float | None = None


class RMSProp:
    """``v <- a v + (1 - a) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``."""

    def __init__(self, cfg: OptimizerConfig = OptimizerConfig()):
        self.cfg = cfg
        self.sq = {}

    def step(self, params: PolicyParams, grads: dict) -> None:
        c = self.cfg
        if c.grad_clip is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > c.grad_clip:
                grads = {k: g * (c.grad_clip / norm) for k, g in grads.items()}
        for name, g in grads.items():
            sq = self.sq.get(name)
            if sq is None:
                sq = np.zeros_like(g)
            sq = c.alpha * sq + (1.0 - c.alpha) * g * g
            self.sq[name] = sq
            upd = params.tensors[name].astype(np.float64) - c.lr * g / (np.sqrt(sq) + c.eps)
            params.tensors[name] = upd.astype(np.float32)


@dataclass
class TrainConfig:
    iterations: int = 200
    episodes_per_iter: int = 4
    horizon: int | None = None
    gamma: float = 0.99
    gae_lambda: float = 0.0
    value_coef: float = 0.5
    entropy_coef: float = 0.1
    normalize_advantages: bool = False
    compute_dtype: str = "float32"
    seed: int = 0
    checkpoint_every: int = 0
    out_dir: str | None = None
    generator: GeneratorParams = field(default_factory=GeneratorParams)


@dataclass
class Episode:
    obs: list
    actions: list
    rewards: list
    terminal: bool
    cause: str
    delta_conf: float | None = None


def stack_obs(obs_list) -> dict:
    return {k: np.stack([o[k] for o in obs_list]) for k in obs_list[0]}


def collect_episode(env, params: PolicyParams, rng: np.random.Generator) -> Episode:
    leaves = params.leaves()
    obs = env.reset()
    observations, actions, rewards = [obs], [], []
    p_first = p_last = None
    done = False
    cause = "horizon"
    while not done:
        logits, _ = forward(obs, leaves, params.config)
        a = sample_action(softmax(logits.data)[0], rng)
        obs, r, done, info = env.step(a)
        observations.append(obs)
        actions.append(a)
        rewards.append(r)
        tr = info.get("transition")
        if tr is not None and tr.pursuing:
            if p_first is None:
                p_first = tr.p_prev
            p_last = tr.p_t
        if done:
            cause = info.get("cause") or "horizon"
    terminal = cause in ("collision", "arrival")
    dconf = None if p_first is None else p_last - p_first
    return Episode(observations, actions, rewards, terminal, cause, dconf)


def advantages(rewards, values, terminal: bool, gamma: float, lam: float):
    """TD(lambda) advantages. ``values`` has one more entry than ``rewards``."""
    T = len(rewards)
    adv = np.zeros(T)
    nxt = 0.0
    for t in reversed(range(T)):
        boot = 0.0 if (terminal and t == T - 1) else values[t + 1]
        delta = rewards[t] + gamma * boot - values[t]
        nxt = delta + gamma * lam * nxt * (0.0 if (terminal and t == T - 1) else 1.0)
        adv[t] = nxt
    return adv


def update(params: PolicyParams, episodes, opt: RMSProp, cfg: TrainConfig) -> dict:
    """One actor-critic step over a batch of episodes (single writer).

    A single forward pass covers every observation; bootstrap values are read
    off it as constants before the loss is built on the non-final rows.
    """
    all_obs, rows, spans = [], [], []
    for ep in episodes:
        start = len(all_obs)
        all_obs.extend(ep.obs)
        rows.extend(range(start, start + len(ep.actions)))
        spans.append((start, start + len(ep.obs)))
    tensors = params.leaves(requires_grad=True)
    logits, values = forward(stack_obs(all_obs), tensors, params.config)
    acts, advs, targets = [], [], []
    for ep, (a, b) in zip(episodes, spans):
        v = values.data[a:b]
        adv = advantages(ep.rewards, v, ep.terminal, cfg.gamma, cfg.gae_lambda)
        acts.extend(ep.actions)
        advs.extend(adv.tolist())
        targets.extend((adv + v[:-1]).tolist())
    advs = np.asarray(advs)
    pg_adv = advs
    if cfg.normalize_advantages and len(advs) > 1:
        pg_adv = (advs - advs.mean()) / (advs.std() + 1e-8)
    loss = actor_critic_loss(ag.take_rows(logits, rows), ag.take_rows(values, rows), acts, pg_adv,
                             targets, cfg.entropy_coef, cfg.value_coef)
    if not np.isfinite(loss.data):
        raise TrainingDivergedError(f"non-finite loss {loss.data}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient in {k}")
    opt.step(params, grads)
    return {"loss": float(loss.data), "mean_adv": float(advs.mean())}


def default_env_factory(cfg: TrainConfig, env_cfg=None):
    from .env import EnvConfig, PursuitEnv
    env_cfg = env_cfg or EnvConfig()

    def make(iteration: int, k: int):
        seed = int(np.random.SeedSequence([cfg.seed, iteration, k]).generate_state(1)[0])
        sc = generate_scenario(cfg.generator, seed)
        return PursuitEnv(sc, env_cfg, episode_seed=seed, horizon=cfg.horizon)
    return make


def train(params: PolicyParams, env_factory, cfg: TrainConfig = TrainConfig(),
          opt_cfg: OptimizerConfig = OptimizerConfig(), callback=None):
    """Train in place-free fashion; returns (new params, learning-curve rows)."""
    params = params.copy()
    opt = RMSProp(opt_cfg)
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    curves = []
    for it in range(cfg.iterations):
        with ag.precision(cfg.compute_dtype):
            episodes = [collect_episode(env_factory(it, k), params, rng) for k in range(cfg.episodes_per_iter)]
            stats = update(params, episodes, opt, cfg)
        dconfs = [e.delta_conf for e in episodes if e.delta_conf is not None]
        row = {
            "iteration": it,
            "mean_return": float(np.mean([sum(e.rewards) for e in episodes])),
            "collision_rate": float(np.mean([e.cause == "collision" for e in episodes])),
            "mean_delta_confidence": float(np.mean(dconfs)) if dconfs else 0.0,
            "loss": stats["loss"],
        }
        curves.append(row)
        if callback is not None:
            callback(it, params, row)
        if cfg.checkpoint_every and cfg.out_dir and (it + 1) % cfg.checkpoint_every == 0:
            from .checkpoint import save_checkpoint
            save_checkpoint(params, Path(cfg.out_dir) / f"ckpt_{it + 1:05d}.bin")
        log.debug("iter %d return %.3f", it, row["mean_return"])
    return params, curves


def write_curves(curves, path) -> None:
    cols = ["iteration", "mean_return", "collision_rate", "mean_delta_confidence"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in curves:
            wr.writerow([row["iteration"]] + [repr(float(row[c])) for c in cols[1:]])


class BeaconEnv:
    """Toy task: rotate to face a fixed beacon. Reward is the drop in absolute heading error."""

    def __init__(self, policy_cfg, seed: int, beacon=(8.0, 5.0), horizon: int = 20,
                 lidar: LidarConfig = LidarConfig(), dt: float = 0.1):
        self.cfg = policy_cfg
        self.rng = np.random.default_rng(seed)
        self.beacon = beacon
        self.horizon = horizon
        self.lidar_cfg = lidar
        self.dt = dt
        self.segments = chains_to_segments([[(0, 0), (10, 0), (10, 10), (0, 10), (0, 0)]])

    def _err(self) -> float:
        p = self.robot.pose
        return abs(normalize_angle(math.atan2(self.beacon[1] - p.y, self.beacon[0] - p.x) - p.theta))

    def _obs(self):
        p = self.robot.pose
        self.lidar.push(raycast_lidar(WorldState(self.tick, self.robot, (), self.segments), p, self.lidar_cfg))
        dx, dy = self.beacon[0] - p.x, self.beacon[1] - p.y
        res = self.cfg.mask_resolution
        return {
            "masks": np.zeros((self.cfg.mask_history, res, res)),
            "lidar": self.lidar.as_array(),
            "v_prev": np.array([self.robot.velocity.v, self.robot.velocity.w]),
            "goal": np.array([math.hypot(dx, dy), normalize_angle(math.atan2(dy, dx) - p.theta)]),
        }

    def reset(self):
        x, y = self.rng.uniform(2.0, 5.0), self.rng.uniform(2.0, 8.0)
        self.robot = RobotState(Pose2D(x, y, self.rng.uniform(-math.pi, math.pi)), Velocity(), 0.3)
        self.tick = 0
        self.lidar = LidarStack()
        return self._obs()

    def step(self, action_index: int):
        from .policy import ActionSpace
        before = self._err()
        vel = ActionSpace().velocity(action_index)
        # rotation only: keeps the robot inside the room
        self.robot = step_robot(self.robot, Velocity(0.0, vel.w), self.dt)
        self.tick += 1
        r = before - self._err()
        done = self.tick >= self.horizon
        return self._obs(), r, done, {"cause": "horizon" if done else None}


def beacon_factory(policy_cfg, seed: int):
    def make(iteration: int, k: int):
        return BeaconEnv(policy_cfg, int(np.random.SeedSequence([seed, iteration, k]).generate_state(1)[0]))
    return make


def evaluate_return(params: PolicyParams, env_factory, episodes: int, seed: int) -> float:
    """Mean return over a fixed set of episodes (common random numbers across calls)."""
    total = 0.0
    for k in range(episodes):
        rng = np.random.default_rng([seed, k])
        ep = collect_episode(env_factory(EVAL_ITERATION, k), params, rng)
        total += sum(ep.rewards)
    return total / episodes


def train_bandit(seed: int, updates: int = 500, rewards=(1.0, -1.0),
                 opt_cfg: OptimizerConfig = OptimizerConfig(lr=0.01)) -> float:
    """Policy-gradient sanity task: two arms, fixed rewards, no baseline.

    Runs the same loss and optimizer as ``train`` on a bare logit vector and
    returns the final probability of arm 0.
    """
    params = PolicyParams(None, {"logits": np.zeros(len(rewards), dtype=np.float32)})
    opt = RMSProp(opt_cfg)
    rng = np.random.default_rng([seed, 0xBA4D])
    for _ in range(updates):
        logits = ag.Tensor(params.tensors["logits"][None].astype(np.float64), requires_grad=True)
        a = sample_action(softmax(logits.data)[0], rng)
        loss = actor_critic_loss(logits, None, [a], [rewards[a]])
        loss.backward()
        opt.step(params, {"logits": logits.grad[0]})
    return float(softmax(params.tensors["logits"].astype(np.float64))[0])
