"""Policy network (mask encoder, lidar encoder, action head + value head), the
discretised action space, the pursuit reward and finite-difference gradient checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NumericError, ShapeError
from .world import V_MAX, V_MIN, W_MAX, W_MIN, Velocity


@dataclass(frozen=True)
class ActionSpace:
    v_levels: tuple = tuple(np.linspace(V_MIN, V_MAX, 5).tolist())
    w_levels: tuple = tuple(np.linspace(W_MIN, W_MAX, 5).tolist())

    def __post_init__(self):
        for v in self.v_levels:
            if not V_MIN <= v <= V_MAX:
                raise ValueError(f"v level {v} outside [{V_MIN}, {V_MAX}]")
        for w in self.w_levels:
            if not W_MIN <= w <= W_MAX:
                raise ValueError(f"w level {w} outside [{W_MIN}, {W_MAX}]")

    @property
    def n(self) -> int:
        return len(self.v_levels) * len(self.w_levels)

    @property
    def actions(self) -> list[Velocity]:
        return [Velocity(v, w) for v in self.v_levels for w in self.w_levels]

    def velocity(self, index: int) -> Velocity:
        iv, iw = divmod(int(index), len(self.w_levels))
        return Velocity(self.v_levels[iv], self.w_levels[iw])


@dataclass(frozen=True)
class PolicyConfig:
    mask_resolution: int = 61
    mask_history: int = 3
    human_channels: tuple = (4, 8, 8, 8)
    kernel: int = 5
    embed_dim: int = 32
    lidar_beams: int = 180
    lidar_channels: tuple = (8, 4)
    lidar_fc: int = 64
    act_hidden: int = 128
    n_actions: int = 25
    goal_dims: int = 2

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def human_grid(self) -> int:
        r = self.mask_resolution
        for _ in self.human_channels:
            r //= 2
        return r


PRESETS = {
    "desk": PolicyConfig(),
    "paper": PolicyConfig(mask_resolution=244, human_channels=(16, 32, 32, 32), embed_dim=128,
                          lidar_channels=(16, 8), lidar_fc=256),
}


def param_shapes(cfg: PolicyConfig) -> dict:
    shapes = {}
    c_in = cfg.mask_history
    for i, c in enumerate(cfg.human_channels):
        shapes[f"human.conv{i}.w"] = (c, c_in, cfg.kernel, cfg.kernel)
        shapes[f"human.conv{i}.b"] = (c,)
        shapes[f"human.norm{i}.gamma"] = (c,)
        shapes[f"human.norm{i}.beta"] = (c,)
        c_in = c
    g = cfg.human_grid()
    if g < 1:
        raise ShapeError(f"mask resolution {cfg.mask_resolution} too small for {len(cfg.human_channels)} pools")
    shapes["human.proj.w"] = (cfg.embed_dim, c_in * g * g)
    shapes["human.proj.b"] = (cfg.embed_dim,)
    c_in = 3
    for i, c in enumerate(cfg.lidar_channels):
        shapes[f"lidar.conv{i}.w"] = (c, c_in)
        shapes[f"lidar.conv{i}.b"] = (c,)
        c_in = c
    shapes["lidar.fc.w"] = (cfg.lidar_fc, c_in * cfg.lidar_beams)
    shapes["lidar.fc.b"] = (cfg.lidar_fc,)
    d_in = cfg.embed_dim + cfg.lidar_fc + 2 + cfg.goal_dims
    shapes["act.fc.w"] = (cfg.act_hidden, d_in)
    shapes["act.fc.b"] = (cfg.act_hidden,)
    shapes["act.out.w"] = (cfg.n_actions, cfg.act_hidden)
    shapes["act.out.b"] = (cfg.n_actions,)
    shapes["value.w"] = (1, cfg.act_hidden)
    shapes["value.b"] = (1,)
    return shapes


@dataclass
class PolicyParams:
    """Named float32 tensors plus the architecture they belong to."""

    config: PolicyConfig
    tensors: dict = field(default_factory=dict)

    def leaves(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(np.array(v, dtype=ag.compute_dtype()), requires_grad) for k, v in self.tensors.items()}

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def scaled(self, factor: float) -> "PolicyParams":
        return PolicyParams(self.config, {k: (v * factor).astype(np.float32) for k, v in self.tensors.items()})


def init_params(cfg: PolicyConfig, seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b") or name.endswith(".beta"):
            arr = np.zeros(shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            if name in ("act.out.w", "value.w"):
                arr *= 0.01
        tensors[name] = arr.astype(np.float32)
    return PolicyParams(cfg, tensors)


def zero_params(cfg: PolicyConfig) -> PolicyParams:
    return PolicyParams(cfg, {k: np.zeros(s, dtype=np.float32) for k, s in param_shapes(cfg).items()})


def _as_batch(x, ndim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == ndim - 1 else x


def encode_human(masks, p: dict, cfg: PolicyConfig) -> Tensor:
    """Four conv(5x5) / channel-norm / relu / 2x2 max-pool stages, then a projection."""
    x = _as_batch(masks, 4)
    want = (cfg.mask_history, cfg.mask_resolution, cfg.mask_resolution)
    if x.shape[1:] != want:
        raise ShapeError(f"mask stack {x.shape[1:]} does not match configured {want}")
    h = Tensor(x)
    pad = cfg.kernel // 2
    for i in range(len(cfg.human_channels)):
        h = ag.conv2d(h, p[f"human.conv{i}.w"], p[f"human.conv{i}.b"], padding=pad)
        h = ag.channel_norm(h, p[f"human.norm{i}.gamma"], p[f"human.norm{i}.beta"])
        h = ag.maxpool2(ag.relu(h))
    h = ag.reshape(h, (h.shape[0], -1))
    return ag.relu(ag.linear(h, p["human.proj.w"], p["human.proj.b"]))


def encode_lidar(ranges, p: dict, cfg: PolicyConfig, max_range: float = 6.0) -> Tensor:
    """Two 1x1 convolutions over the (3, beams) stack, then a dense layer."""
    x = _as_batch(ranges, 3)
    if x.shape[1:] != (3, cfg.lidar_beams):
        raise ShapeError(f"lidar stack {x.shape[1:]} does not match configured (3, {cfg.lidar_beams})")
    n = x.shape[0]
    h = Tensor((x / max_range).transpose(0, 2, 1).reshape(n * cfg.lidar_beams, 3))
    for i in range(len(cfg.lidar_channels)):
        h = ag.relu(ag.linear(h, p[f"lidar.conv{i}.w"], p[f"lidar.conv{i}.b"]))
    h = ag.reshape(h, (n, -1))
    return ag.relu(ag.linear(h, p["lidar.fc.w"], p["lidar.fc.b"]))


def act_head(z_img: Tensor, z_lidar: Tensor, v_prev, goal, p: dict) -> tuple[Tensor, Tensor]:
    """Action logits and state value from the fused features."""
    v_prev = _as_batch(v_prev, 2)
    goal = _as_batch(goal, 2)
    x = ag.concat([z_img, z_lidar, Tensor(v_prev), Tensor(goal)], axis=1)
    h = ag.relu(ag.linear(x, p["act.fc.w"], p["act.fc.b"]))
    logits = ag.linear(h, p["act.out.w"], p["act.out.b"])
    value = ag.linear(h, p["value.w"], p["value.b"])
    return logits, ag.reshape(value, (value.shape[0],))


# the image branch runs in slices; large conv batches thrash the cache
IMAGE_CHUNK = 16


def forward(obs_batch: dict, p: dict, cfg: PolicyConfig) -> tuple[Tensor, Tensor]:
    masks = _as_batch(obs_batch["masks"], 4)
    if len(masks) <= IMAGE_CHUNK:
        z_img = encode_human(masks, p, cfg)
    else:
        z_img = ag.concat([encode_human(masks[i:i + IMAGE_CHUNK], p, cfg)
                           for i in range(0, len(masks), IMAGE_CHUNK)], axis=0)
    z_lidar = encode_lidar(obs_batch["lidar"], p, cfg)
    return act_head(z_img, z_lidar, obs_batch["v_prev"], obs_batch["goal"], p)


def softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite action logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def act(z_img, z_lidar, v_prev, goal, p: dict) -> np.ndarray:
    """Probability vector over the action space for one observation."""
    logits, _ = act_head(z_img, z_lidar, v_prev, goal, p)
    return softmax(logits.data)[0]


def action_probs(obs: dict, params: PolicyParams, leaves: dict | None = None) -> np.ndarray:
    leaves = leaves or params.leaves()
    logits, _ = forward(obs, leaves, params.config)
    return softmax(logits.data)[0]


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw: exactly one uniform per call."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def goal_polar(robot_pose, goal_xy) -> tuple[float, float]:
    """Goal position in the robot frame as (distance, bearing)."""
    if goal_xy is None:
        return (0.0, 0.0)
    dx, dy = goal_xy[0] - robot_pose.x, goal_xy[1] - robot_pose.y
    bearing = math.atan2(dy, dx) - robot_pose.theta
    return (math.hypot(dx, dy), math.atan2(math.sin(bearing), math.cos(bearing)))


@dataclass(frozen=True)
class RewardConfig:
    r_collision: float = -15.0
    w_w: float = -0.1
    w_abs_threshold: float = 0.7
    r_p: float = 2.5
    r_n: float = -0.5
    r_arrival: float = 15.0
    w_g: float = 2.5
    xi: float = 0.1
    use_arrival: bool = True
    use_progress: bool = True

    def __post_init__(self):
        if not self.r_collision < 0:
            raise ValueError("r_collision must be negative")
        if not self.r_p > 0 > self.r_n:
            raise ValueError("need r_p > 0 > r_n")


@dataclass(frozen=True)
class RewardContext:
    collided: bool = False
    w: float = 0.0
    pursuing: bool = False
    p_t: float | None = None
    p_prev: float | None = None
    arrived: bool = False
    d_prev: float | None = None
    d_t: float | None = None


def r_collision_term(ctx: RewardContext, cfg: RewardConfig) -> float:
    return cfg.r_collision if ctx.collided else 0.0


def r_rotation_term(ctx: RewardContext, cfg: RewardConfig) -> float:
    return cfg.w_w * abs(ctx.w) if abs(ctx.w) > cfg.w_abs_threshold else 0.0


def r_pursuit_term(ctx: RewardContext, cfg: RewardConfig) -> float:
    if not ctx.pursuing:
        return 0.0
    return cfg.r_p if ctx.p_t > ctx.p_prev else cfg.r_n


def shaping_term(ctx: RewardContext, cfg: RewardConfig) -> float:
    s = 0.0
    if cfg.use_arrival and ctx.pursuing and ctx.arrived:
        s += cfg.r_arrival
    if cfg.use_progress and ctx.pursuing and ctx.d_prev is not None and ctx.d_t is not None:
        s += cfg.w_g * (ctx.d_prev - ctx.d_t)
    return s


def reward_terms(ctx: RewardContext, cfg: RewardConfig) -> dict:
    return {
        "r_c": r_collision_term(ctx, cfg),
        "r_w": r_rotation_term(ctx, cfg),
        "r_h": r_pursuit_term(ctx, cfg),
        "shaping": shaping_term(ctx, cfg),
    }


def reward(ctx: RewardContext, cfg: RewardConfig = RewardConfig()) -> float:
    t = reward_terms(ctx, cfg)
    return t["r_c"] + t["r_w"] + t["r_h"] + t["shaping"]


def grad_check(leaves: dict, loss_fn, eps: float = 1e-5, n_coords: int = 200, seed: int = 0,
               floor: float = 1e-6, min_eps: float = 1e-8) -> tuple[float, list]:
    """Max relative error between backprop and central differences.

    ``leaves`` maps names to float64 arrays; ``loss_fn`` takes a dict of
    Tensors and returns a scalar Tensor. Every tensor contributes at least one
    coordinate. Relative error is ``|a - n| / max(|a|, |n|, floor)``.

    Relu and max-pool make the loss piecewise smooth. When the two one-sided
    slopes disagree the step straddles a kink, so it is shrunk tenfold (down
    to ``min_eps``) until they agree. Report rows are
    ``(name, index, analytic, numeric, rel_err, eps_used)``.
    Always evaluated in float64.
    """
    with ag.precision(np.float64):
        return _grad_check(leaves, loss_fn, eps, n_coords, seed, floor, min_eps)


def _grad_check(leaves, loss_fn, eps, n_coords, seed, floor, min_eps):
    rng = np.random.default_rng(seed)
    params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in leaves.items()}
    loss = loss_fn(params)
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    names = list(params)
    sizes = np.array([params[k].data.size for k in names])
    picks = [(k, int(rng.integers(params[k].data.size))) for k in names]
    flat = rng.choice(sizes.sum(), size=max(0, n_coords - len(picks)), replace=sizes.sum() < n_coords)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((names[i], int(f - offsets[i])))
    base = {k: t.data for k, t in params.items()}
    f0 = float(loss.data)
    worst = 0.0
    report = []
    for name, idx in picks:
        arr = base[name].copy()
        flat_arr = arr.reshape(-1)
        orig = flat_arr[idx]

        def at(x):
            flat_arr[idx] = x
            return float(loss_fn({k: Tensor(arr if k == name else v) for k, v in base.items()}).data)
        h = eps
        while True:
            up, down = at(orig + h), at(orig - h)
            fwd, bwd = (up - f0) / h, (f0 - down) / h
            smooth = abs(fwd - bwd) <= 1e-2 * max(abs(fwd), abs(bwd), floor)
            if smooth or h / 10 < min_eps:
                break
            h /= 10
        num = (up - down) / (2 * h)
        ana = float(analytic[name].reshape(-1)[idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        report.append((name, idx, ana, num, rel, h))
        worst = max(worst, rel)
    return worst, report


def actor_critic_loss(logits: Tensor, values: Tensor, actions, advantages, value_targets=None,
                      entropy_coef: float = 0.0, value_coef: float = 0.5) -> Tensor:
    """-mean(A log pi(a|s)) - entropy_coef * mean(H) + value_coef * mean((V - target)^2)."""
    actions = np.asarray(actions)
    adv = np.asarray(advantages, dtype=np.float64)
    logp = ag.log_softmax(logits)
    n = len(actions)
    total = ag.mul(ag.sum_all(ag.mul(ag.pick(logp, actions), adv)), -1.0 / n)
    if entropy_coef:
        ent = ag.sum_all(ag.mul(ag.exp(logp), logp))  # = -sum entropy
        total = total + ag.mul(ent, entropy_coef / n)
    if value_targets is not None:
        diff = values - np.asarray(value_targets, dtype=np.float64)
        total = total + ag.mul(ag.sum_all(ag.mul(diff, diff)), value_coef / n)
    return total


def policy_loss_fn(obs_batch: dict, actions, advantages, cfg: PolicyConfig, value_targets=None,
                   entropy_coef: float = 0.0, value_coef: float = 0.5):
    """Closure computing the actor-critic loss for a fixed batch."""

    def loss(p: dict) -> Tensor:
        logits, values = forward(obs_batch, p, cfg)
        return actor_critic_loss(logits, values, actions, advantages, value_targets, entropy_coef, value_coef)
    return loss
