"""Command-line entry point: gen, train, eval, table, rf-audit, grad-check."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, PursuitError

log = logging.getLogger("amodal_pursuit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_RUNTIME = 4


def _load_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def _section(cls, base, doc: dict, key: str):
    d = doc.get(key) or {}
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"[{key}] unknown keys: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return replace(base, **vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{key}] {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args, doc) -> int:
    from .harness import make_suite
    from .world import GeneratorParams, save_scenarios
    gp = _section(GeneratorParams, GeneratorParams(), doc, "generator")
    if args.layout:
        gp = replace(gp, layout=args.layout)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    suite = make_suite(args.n, args.seed, gp)
    path = _out_dir(args) / args.name
    save_scenarios(suite, path)
    print(f"wrote {len(suite)} scenarios to {path}")
    return EXIT_OK


def _env_config(doc, preset: str):
    from .detection import OracleConfig
    from .env import EnvConfig
    from .policy import PRESETS, PolicyConfig, RewardConfig
    pcfg = _section(PolicyConfig, PRESETS[preset], doc, "policy")
    return EnvConfig(oracle=_section(OracleConfig, OracleConfig(), doc, "oracle"),
                     reward=_section(RewardConfig, RewardConfig(), doc, "reward"),
                     policy=pcfg)


def cmd_train(args, doc) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .policy import init_params
    from .trainer import OptimizerConfig, TrainConfig, default_env_factory, train, write_curves
    from .world import GeneratorParams
    env_cfg = _env_config(doc, args.preset)
    out = _out_dir(args)
    tc = _section(TrainConfig, TrainConfig(), doc, "train")
    tc = replace(tc, seed=args.seed, out_dir=str(out),
                 generator=_section(GeneratorParams, GeneratorParams(), doc, "generator"))
    if args.iterations is not None:
        tc = replace(tc, iterations=args.iterations)
    if args.checkpoint_every is not None:
        tc = replace(tc, checkpoint_every=args.checkpoint_every)
    tc = replace(tc, entropy_coef=env_cfg.reward.xi) if "entropy_coef" not in (doc.get("train") or {}) else tc
    opt = _section(OptimizerConfig, OptimizerConfig(), doc, "optimizer")
    if args.lr is not None:
        opt = replace(opt, lr=args.lr)
    params = (load_checkpoint(args.init, env_cfg.policy) if args.init
              else init_params(env_cfg.policy, args.seed))

    def progress(it, _params, row):
        log.info("iter %d  return %.3f  collisions %.2f", it, row["mean_return"], row["collision_rate"])

    trained, curves = train(params, default_env_factory(tc, env_cfg), tc, opt, callback=progress)
    save_checkpoint(trained, out / "final.ckpt")
    write_curves(curves, out / "curves.csv")
    print(f"wrote {out / 'final.ckpt'} and {out / 'curves.csv'}")
    return EXIT_OK


def _run_config(args, doc, policy=None, checkpoint=None):
    from .harness import RunConfig
    run = RunConfig.from_dict(doc.get("run") or {})
    run = replace(run, preset=args.preset, oracle=doc.get("oracle") or {}, reward=doc.get("reward") or {},
                  policy_config=doc.get("policy") or {})
    if policy is not None:
        run = replace(run, policy=policy)
    if checkpoint is not None:
        run = replace(run, checkpoint=checkpoint)
    if getattr(args, "suite", None):
        run = replace(run, suite=args.suite)
    if getattr(args, "seeds", None):
        run = replace(run, seeds=tuple(args.seeds))
    else:
        run = replace(run, seeds=(args.seed,))
    return run


def cmd_eval(args, doc) -> int:
    from .harness import evaluate, report_csv, report_json
    run = _run_config(args, doc, args.policy, args.checkpoint)
    out = _out_dir(args)
    rep = evaluate(run, log_path=out / "episodes.jsonl")
    (out / "report.csv").write_text(report_csv(rep))
    (out / "report.json").write_text(report_json(rep))
    sys.stdout.write(report_csv(rep))
    return EXIT_OK


def cmd_table(args, doc) -> int:
    from .harness import load_suite, run_table, table_csv, table_text
    run = _run_config(args, doc)
    if not run.suite:
        raise ConfigError("--suite is required")
    entries = [("passive", "passive", None), ("random", "random", None), ("shortest", "shortest", None)]
    if args.checkpoint:
        entries.append(("learned", "learned", args.checkpoint))
    rows = run_table(entries, load_suite(run.suite), run.seeds, preset=run.preset, oracle=run.oracle,
                     reward=run.reward, policy_config=run.policy_config, horizons=run.horizons,
                     control_horizon=run.control_horizon, greedy=run.greedy)
    out = _out_dir(args)
    (out / "table.csv").write_text(table_csv(rows))
    (out / "table.txt").write_text(table_text(rows))
    sys.stdout.write(table_text(rows))
    return EXIT_OK


def cmd_rf_audit(args, doc) -> int:
    from .percept import LayerSpec, parse_layer_file, receptive_field_trace
    if args.layers:
        p = Path(args.layers)
        if not p.exists():
            raise ConfigError(f"layer file {p} does not exist")
        layers = parse_layer_file(p.read_text())
    else:
        from .policy import PRESETS
        cfg = PRESETS[args.preset]
        # conv (stride 1) then 2x2 pool for each image stage
        layers = []
        for _ in cfg.human_channels:
            layers += [LayerSpec(1, cfg.kernel), LayerSpec(2, 2)]
    trace = receptive_field_trace(layers)
    print("layer  stride  kernel  rf")
    for i, (layer, rf) in enumerate(zip(layers, trace), 1):
        print(f"{i:5d}  {layer.stride:6d}  {layer.kernel:6d}  {rf}")
    return EXIT_OK


def cmd_grad_check(args, doc) -> int:
    from .autograd import precision
    from .policy import PRESETS, grad_check, init_params, policy_loss_fn
    cfg = _section(type(PRESETS[args.preset]), PRESETS[args.preset], doc, "policy")
    rng = np.random.default_rng(args.seed)
    n = 3
    batch = {
        "masks": (rng.random((n, cfg.mask_history, cfg.mask_resolution, cfg.mask_resolution)) < 0.3).astype(float),
        "lidar": rng.uniform(0.2, 6.0, (n, 3, cfg.lidar_beams)),
        "v_prev": rng.uniform(-1, 1, (n, 2)),
        "goal": rng.uniform(-2, 2, (n, 2)),
    }
    acts = rng.integers(cfg.n_actions, size=n)
    adv = rng.normal(size=n)
    loss = policy_loss_fn(batch, acts, adv, cfg, value_targets=rng.normal(size=n), entropy_coef=0.1)
    params = init_params(cfg, args.seed)
    with precision(np.float64):
        leaves = {k: v.astype(np.float64) for k, v in params.tensors.items()}
        worst, _ = grad_check(leaves, loss, n_coords=args.coords, seed=args.seed)
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} over {args.coords} coordinates: {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amodal-pursuit", description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="JSON file with optional sections: generator, oracle, reward, policy, "
                                     "train, optimizer, run")
    ap.add_argument("--out", default="out")
    ap.add_argument("--preset", choices=("desk", "paper"), default="desk")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scenario suite")
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--layout", choices=("occlusion", "random"))
    g.add_argument("--name", default="suite.json")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train the pursuit policy")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--init", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate one policy on a suite")
    e.add_argument("--policy", choices=("passive", "random", "shortest", "learned"), required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--suite")
    e.add_argument("--seeds", type=int, nargs="+")
    e.set_defaults(fn=cmd_eval)

    tb = sub.add_parser("table", help="comparison table over all policies")
    tb.add_argument("--suite")
    tb.add_argument("--checkpoint")
    tb.add_argument("--seeds", type=int, nargs="+")
    tb.set_defaults(fn=cmd_table)

    rf = sub.add_parser("rf-audit", help="receptive-field trace of a layer stack")
    rf.add_argument("--layers", help="text file, one 'stride kernel' pair per line")
    rf.set_defaults(fn=cmd_rf_audit)

    gc = sub.add_parser("grad-check", help="finite-difference check of the policy gradient")
    gc.add_argument("--coords", type=int, default=200)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        doc = _load_config(args.config)
        return args.fn(args, doc)
    except PursuitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
