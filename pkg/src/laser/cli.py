"""Command line: named experiments, the invariant verifier and single-agent or sweep runs.

Config files are JSON objects. For ``run`` they may hold ``parameters``,
``seeds`` and ``output_dir``; for ``run-agent``/``run-sweep`` they mirror the
field names of ``SweepConfig`` and ``HyperParams``. Values from a config file
override the corresponding flags. ``LASER_OUT_DIR`` overrides every output
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from laser.agent import HyperParams, SweepConfig, run_agent, run_sweep, sweep_grid
from laser.estimators import ClipConfig
from laser.harness import (EXPERIMENTS, TAMPERS, ExperimentError, ExperimentSpec, catalog, format_checks,
                           output_root, run_experiment, verify_all)
from laser.replay import BatchSpec
from laser.trust_region import RelevanceConfig


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return data


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named experiment")
    run.add_argument("experiment", choices=sorted(EXPERIMENTS))
    run.add_argument("--param", action="append", type=_key_value, default=[], metavar="KEY=VALUE")
    run.add_argument("--seeds", type=_seeds, default=[0])
    run.add_argument("--out", default="results")
    run.add_argument("--workers", type=int, default=1, help="processes running seeds in parallel")
    run.add_argument("--config")

    verify = sub.add_parser("verify", help="run every invariant check")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--tamper", choices=TAMPERS, help="inject a known fault to see the check fail")

    sub.add_parser("list", help="print the experiment catalog")

    for name in ("run-agent", "run-sweep"):
        p = sub.add_parser(name, help=f"train {'one agent' if name == 'run-agent' else 'a hyperparameter sweep'}")
        p.add_argument("--env", default="gridworld4")
        p.add_argument("--env-param", action="append", type=_key_value, default=[], metavar="KEY=VALUE")
        p.add_argument("--steps", type=int, default=50_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--learning-rate", type=float, default=1.0)
        p.add_argument("--entropy-cost", type=float, default=0.03)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--unroll-length", type=int, default=19)
        p.add_argument("--replay-capacity", type=int, default=20_000)
        p.add_argument("--replay-ratio", type=float, default=0.875,
                       help="fraction of each batch drawn from replay; 0 disables replay")
        p.add_argument("--rho-bar", type=float, default=1.0)
        p.add_argument("--trust-region", type=float, metavar="B", help="relevance threshold; omit to disable")
        p.add_argument("--eval-interval", type=int, default=5_000)
        p.add_argument("--out", default="results")
        p.add_argument("--config")
        if name == "run-sweep":
            p.add_argument("--shared", action="store_true", help="one replay buffer for every agent")
            p.add_argument("--threaded", action="store_true", help="concurrent actor and learner threads")
            p.add_argument("--lr-factors", default="0.5,2")
            p.add_argument("--entropy-factors", default="0.5,2")
    return parser


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    params = dict(args.param)
    params.update(cfg.get("parameters", {}))
    spec = ExperimentSpec(args.experiment, params, cfg.get("seeds", args.seeds), cfg.get("output_dir", args.out))
    result = run_experiment(spec, workers=cfg.get("workers", args.workers))
    summary = {k: v for k, v in result.verdict.items() if k not in ("parameters", "per_seed")}
    print(json.dumps(summary, indent=1, default=str))
    for path in result.artifacts:
        print(path)
    return result.status


def _hyper_params(args, cfg: dict) -> HyperParams:
    replay_ratio = cfg.get("replay_ratio", args.replay_ratio)
    batch = BatchSpec.from_replay_ratio(cfg.get("batch_size", args.batch_size), replay_ratio,
                                        cfg.get("unroll_length", args.unroll_length))
    rho_bar = cfg.get("rho_bar", args.rho_bar)
    threshold = cfg.get("trust_region", args.trust_region)
    fields = {f.name for f in dataclasses.fields(HyperParams)}
    extra = dict(cfg.get("hyper_params", {}))
    unknown = set(extra) - fields
    if unknown:
        raise ValueError(f"unknown hyper_params keys: {sorted(unknown)}")
    hp = HyperParams(learning_rate=cfg.get("learning_rate", args.learning_rate),
                     entropy_cost=cfg.get("entropy_cost", args.entropy_cost),
                     online_fraction=batch.online_fraction, batch_size=batch.batch_size,
                     unroll_length=batch.unroll_length, clip=ClipConfig(rho_bar, 1.0),
                     trust_region=RelevanceConfig(threshold) if threshold is not None else None)
    return hp.with_(**extra) if extra else hp


def _env_params(args, cfg: dict) -> dict:
    params = {}
    for key, value in args.env_param:
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    params.update(cfg.get("env_params", {}))
    return params


def _cmd_run_agent(args) -> int:
    cfg = _load_config(args.config)
    hp = _hyper_params(args, cfg)
    out = output_root(cfg.get("output_dir", args.out))
    os.makedirs(out, exist_ok=True)
    capacity = cfg.get("replay_capacity", args.replay_capacity)
    res = run_agent(cfg.get("environment", args.env), hp, capacity if hp.batch_spec.n_replay else None,
                    cfg.get("total_env_steps", args.steps), cfg.get("seed", args.seed),
                    cfg.get("eval_interval", args.eval_interval), env_params=_env_params(args, cfg))
    path = os.path.join(out, "agent0.csv")
    res.curve.write_csv(path)
    print(f"env_steps={res.env_steps} learner_steps={res.learner_steps} noop_steps={res.noop_steps}")
    print(path)
    return 0


def _cmd_run_sweep(args) -> int:
    cfg = _load_config(args.config)
    base = _hyper_params(args, cfg)
    lr_f = cfg.get("lr_factors", [float(x) for x in args.lr_factors.split(",")])
    ent_f = cfg.get("entropy_factors", [float(x) for x in args.entropy_factors.split(",")])
    sweep = SweepConfig(sweep_grid(base, lr_f, ent_f), shared_replay=cfg.get("shared_replay", args.shared),
                        replay_capacity=cfg.get("replay_capacity", args.replay_capacity),
                        total_env_steps=cfg.get("total_env_steps", args.steps),
                        environment=cfg.get("environment", args.env), seed=cfg.get("seed", args.seed),
                        env_params=_env_params(args, cfg),
                        eval_interval=cfg.get("eval_interval", args.eval_interval),
                        threaded=cfg.get("threaded", args.threaded))
    res = run_sweep(sweep)
    out = output_root(cfg.get("output_dir", args.out))
    os.makedirs(out, exist_ok=True)
    paths = res.write_csvs(out)
    print(f"final sweep-best return {res.final_best():.4f}")
    print("\n".join(paths))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "list":
            print(catalog())
            return 0
        if args.command == "verify":
            checks = verify_all(args.seed, args.tamper)
            print(format_checks(checks))
            return 0 if all(c.passed for c in checks) else 1
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "run-agent":
            return _cmd_run_agent(args)
        return _cmd_run_sweep(args)
    except (ExperimentError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
