"""Evaluation runs, comparison tables and report files."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .detection import OracleConfig
from .env import EnvConfig, EpisodeLog, make_policy, rollout
from .errors import ConfigError
from .metrics import DEFAULT_HORIZON_TICKS, MetricsReport, report
from .policy import PRESETS, PolicyConfig, RewardConfig
from .world import GeneratorParams, Scenario, generate_suite, load_scenarios

POLICIES = ("passive", "random", "shortest", "learned")


def thread_count() -> int:
    raw = os.environ.get("SEEKNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SEEKNET_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Ordered map; fans out to worker processes when more than one thread is allowed."""
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _overlay(cls, base, overrides: dict | None):
    if not overrides:
        return base
    unknown = set(overrides) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    try:
        return replace(base, **vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass
class RunConfig:
    policy: str = "passive"
    checkpoint: str | None = None
    suite: str | None = None
    seeds: tuple = (0,)
    horizons: dict = field(default_factory=lambda: dict(DEFAULT_HORIZON_TICKS))
    control_horizon: int | None = None    # None: each scenario's own duration
    preset: str = "desk"
    greedy: bool = False
    oracle: dict = field(default_factory=dict)
    reward: dict = field(default_factory=dict)
    policy_config: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.policy == "learned" and not self.checkpoint:
            raise ConfigError("learned policy needs a checkpoint")
        if self.checkpoint and not Path(self.checkpoint).exists():
            raise ConfigError(f"checkpoint {self.checkpoint} does not exist")
        if self.suite and not Path(self.suite).exists():
            raise ConfigError(f"scenario suite {self.suite} does not exist")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if any(int(t) <= 0 for t in self.horizons.values()):
            raise ConfigError("horizons must be positive")
        if self.control_horizon is not None and self.control_horizon < 1:
            raise ConfigError("control horizon must be >= 1")

    def env_config(self) -> EnvConfig:
        pcfg = _overlay(PolicyConfig, PRESETS[self.preset], self.policy_config)
        return EnvConfig(oracle=_overlay(OracleConfig, OracleConfig(), self.oracle),
                         reward=_overlay(RewardConfig, RewardConfig(), self.reward),
                         policy=pcfg)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        if "horizons" in d:
            d["horizons"] = {int(k): int(v) for k, v in d["horizons"].items()}
        return cls(**d)


def _episode_job(job):
    scenario, kind, params, env_cfg, horizon, seed, measure_until, greedy = job
    policy = make_policy(kind, params)
    if greedy and hasattr(policy, "greedy"):
        policy.greedy = True
    return rollout(scenario, policy, env_cfg, horizon=horizon, seed=seed, measure_until=measure_until)


def run_episodes(run: RunConfig, scenarios: list[Scenario]) -> list[EpisodeLog]:
    """All (seed, scenario) episodes of a run, ordered by seed then scenario."""
    run.validate()
    env_cfg = run.env_config()
    params = load_checkpoint(run.checkpoint, env_cfg.policy) if run.policy == "learned" else None
    jobs = []
    for s in run.seeds:
        for i, sc in enumerate(scenarios):
            horizon = run.control_horizon if run.control_horizon is not None else sc.duration
            # keep the world running long enough to score the longest horizon
            until = horizon + max(run.horizons.values()) + 1
            jobs.append((sc, run.policy, params, env_cfg, horizon, episode_seed(s, i), until, run.greedy))
    return parallel_map(_episode_job, jobs)


def load_suite(path) -> list[Scenario]:
    if not Path(path).exists():
        raise ConfigError(f"scenario suite {path} does not exist")
    return load_scenarios(path)


def evaluate(run: RunConfig, scenarios: list[Scenario] | None = None, log_path=None) -> MetricsReport:
    if scenarios is None:
        if not run.suite:
            raise ConfigError("no scenario suite given")
        scenarios = load_suite(run.suite)
    if not scenarios:
        raise ConfigError("scenario suite is empty")
    logs = run_episodes(run, scenarios)
    if log_path is not None:
        write_logs(logs, log_path)
    return report(logs, run.seeds, run.horizons)


def write_logs(logs, path) -> None:
    with open(path, "w") as fh:
        for lg in logs:
            fh.write(lg.to_jsonl())


def read_logs(path) -> list[EpisodeLog]:
    return EpisodeLog.from_jsonl(Path(path).read_text())


def report_from_logs(path, seeds=(), horizons: dict = DEFAULT_HORIZON_TICKS) -> MetricsReport:
    return report(read_logs(path), seeds, horizons)


def suite_seeds(n: int, seed: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, 0x5C, i]).generate_state(1)[0]) for i in range(n)]


def make_suite(n: int, seed: int, params: GeneratorParams = GeneratorParams()) -> list[Scenario]:
    return generate_suite(params, suite_seeds(n, seed))


# ---- tables ----

TABLE_COLUMNS = ("train", "test", "acc_cls", "miou", "acc_tr", "delta_acc_80", "delta_acc_160",
                 "delta_acc_320", "collision_rate", "episodes")


def table_row(train_label: str, test_label: str, rep: MetricsReport) -> dict:
    row = {"train": train_label, "test": test_label}
    row.update(rep.as_row())
    if test_label == "passive":
        # a robot that never moves has no pursuit effect to report
        for k in rep.delta_acc:
            row[f"delta_acc_{k}"] = None
    return row


def run_table(entries, scenarios: list[Scenario], seeds=(0,), **run_kwargs) -> list[dict]:
    """``entries``: (train label, test policy, checkpoint or None) triples."""
    if len(entries) < 2:
        raise ConfigError("a comparison table needs at least two policies")
    rows = []
    for train_label, test_policy, ckpt in entries:
        run = RunConfig(policy=test_policy, checkpoint=ckpt, seeds=tuple(seeds), **run_kwargs)
        rows.append(table_row(train_label, test_policy, evaluate(run, scenarios)))
    return rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{100 * v:.1f}" if v <= 1.0 else f"{v:.3f}"
    return str(v)


def table_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TABLE_COLUMNS)
    for r in rows:
        wr.writerow(["-" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                     for c in TABLE_COLUMNS])
    return buf.getvalue()


def table_text(rows) -> str:
    cells = [list(TABLE_COLUMNS)] + [[_fmt(r.get(c)) for c in TABLE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_csv(rep: MetricsReport) -> str:
    row = rep.as_row()
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(list(row))
    wr.writerow(["-" if v is None else repr(v) if isinstance(v, float) else v for v in row.values()])
    return buf.getvalue()


def report_json(rep: MetricsReport) -> str:
    d = rep.as_row()
    d["seeds"] = list(rep.seeds)
    return json.dumps(d, sort_keys=True, indent=1)
