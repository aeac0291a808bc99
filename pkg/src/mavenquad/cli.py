"""Command-line interface: training, evaluation, throughput, inspection.

Any config value can be overridden with `--section.key value` pairs on top
of the YAML config file; the MAVEN_SEED environment variable overrides the
seed everywhere.
"""

import argparse
import os
import sys

from .bench import measure_throughput, throughput_suite, write_report
from .checkpoint import CheckpointError, inspect_checkpoint, load_checkpoint
from .config import (ConfigError, apply_overrides, config_from_dict,
                     load_config)
from .deploy import (CheckpointMismatch, fault_eval_tasks, mass_eval_tasks,
                     run_benchmark)
from .train import METHODS, MetaTrainer


class CliError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mavenquad",
        description="Meta-RL quadrotor waypoint flight toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run meta-training or a baseline")
    tr.add_argument("--scenario", choices=("mass", "thrust_loss"))
    tr.add_argument("--method", choices=METHODS)
    tr.add_argument("--config", help="YAML config file")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--out", help="run directory (default runs/<name>)")
    tr.add_argument("--max-steps", type=int,
                    help="stop after this many env steps")
    tr.add_argument("--quiet", action="store_true",
                    help="suppress stdout progress lines")

    ev = sub.add_parser("eval", help="benchmark checkpoints on track suites")
    ev.add_argument("--checkpoint", action="append", required=True,
                    metavar="[LABEL=]PATH",
                    help="checkpoint to evaluate; repeatable")
    ev.add_argument("--suite", default="random_tracks",
                    help="switchback | random_tracks | named track")
    ev.add_argument("--n", type=int, help="number of random tracks")
    ev.add_argument("--tasks", metavar="KIND=V1,V2,...",
                    help="mass=0.25,0.375,0.5 or fault=0,0.15,0.3")
    ev.add_argument("--seed", type=int, default=0,
                    help="trial seed (tracks, action noise)")
    ev.add_argument("--out", help="report directory")
    ev.add_argument("--deterministic-action", action="store_true")
    ev.add_argument("--deterministic-latent", action="store_true",
                    help="use the posterior mean instead of sampling z")
    ev.add_argument("--export-trajectories", action="store_true",
                    help="write one trajectory CSV per method and task")
    ev.add_argument("--quiet", action="store_true")

    be = sub.add_parser("bench-throughput",
                        help="measure batch env steps per second")
    be.add_argument("--envs", type=int, default=4096)
    be.add_argument("--steps", type=int, default=1000)
    be.add_argument("--workers", type=int,
                    help="worker processes (default: CPU count)")
    be.add_argument("--suite", action="store_true",
                    help="sweep batch sizes 64/1024/4096 and write a report")
    be.add_argument("--report", help="report path (with --suite)")
    be.add_argument("--seed", type=int, default=0)

    ic = sub.add_parser("inspect-checkpoint",
                        help="print checkpoint metadata and tensor table")
    ic.add_argument("path")
    return p


def parse_extra_overrides(extra) -> list:
    """Leftover args as ("section.key", raw-value) pairs; reject the rest."""
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise CliError(f"unknown flag {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, _, val = key.partition("=")
        else:
            i += 1
            if i >= len(extra):
                raise CliError(f"override {tok!r} is missing a value")
            val = extra[i]
        out.append((key, val))
        i += 1
    return out


def env_seed():
    raw = os.environ.get("MAVEN_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"MAVEN_SEED must be an integer, got {raw!r}")


def parse_task_arg(spec, cfg):
    kind, _, rest = spec.partition("=")
    try:
        vals = [float(x) for x in rest.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"cannot parse task values in {spec!r}")
    if not vals:
        raise CliError(f"task spec {spec!r} has no values")
    if kind == "mass":
        return mass_eval_tasks(vals)
    if kind == "fault":
        return fault_eval_tasks(vals, rotor=cfg.eval.fault_rotor,
                                mass=cfg.tasks.nominal_mass)
    raise CliError(f"unknown task kind {kind!r} (mass or fault)")


def default_eval_tasks(ck_path, cfg):
    """Task grid implied by the checkpoint's training scenario."""
    ck = load_checkpoint(ck_path)
    scenario = (ck.extra or {}).get("scenario", "mass")
    if scenario == "thrust_loss":
        return fault_eval_tasks(rotor=cfg.eval.fault_rotor,
                                mass=cfg.tasks.nominal_mass)
    if cfg.tasks.mass_values:
        return mass_eval_tasks(cfg.tasks.mass_values)
    mid = 0.5 * (cfg.tasks.mass_min + cfg.tasks.mass_max)
    return mass_eval_tasks([cfg.tasks.mass_min, mid, cfg.tasks.mass_max])


def cmd_train(args, overrides) -> int:
    cfg = load_config(args.config, overrides)
    if args.scenario:
        cfg.tasks.scenario = args.scenario
    if args.method:
        cfg.train.method = args.method
    if args.seed is not None:
        cfg.train.seed = args.seed
    seed = env_seed()
    if seed is not None:
        cfg.train.seed = seed
    method = cfg.train.method
    scenario = cfg.tasks.scenario
    out = args.out or os.path.join(
        "runs", f"{method}_{scenario}_s{cfg.train.seed}")
    trainer = MetaTrainer(cfg, scenario, method, out)
    trainer.progress = not args.quiet
    path = trainer.train(max_steps=args.max_steps)
    print(f"checkpoint: {path}")
    return 0


def cmd_eval(args, overrides) -> int:
    checkpoints = {}
    for item in args.checkpoint:
        label, _, path = item.rpartition("=")
        if not label:
            path = item
            label = load_checkpoint(path).method
        if label in checkpoints:
            raise CliError(f"duplicate method label {label!r}; "
                           "use LABEL=PATH to disambiguate")
        checkpoints[label] = path

    first = next(iter(checkpoints.values()))
    ck = load_checkpoint(first)
    cfg_dict = apply_overrides(dict(ck.config), overrides)
    cfg = config_from_dict(cfg_dict)
    seed = env_seed()
    if seed is not None:
        args.seed = seed
    n_tracks = args.n if args.n is not None else cfg.eval.n_tracks
    tasks = parse_task_arg(args.tasks, cfg) if args.tasks \
        else default_eval_tasks(first, cfg)

    report = run_benchmark(
        checkpoints, args.suite, tasks, n_tracks, args.seed,
        out_dir=args.out, overrides=overrides,
        deterministic_action=args.deterministic_action
        or cfg.eval.deterministic_action,
        deterministic_latent=args.deterministic_latent
        or cfg.eval.deterministic_latent,
        export_first=args.export_trajectories, progress=not args.quiet)
    for agg in report.aggregates():
        if agg["fault_loss"] > 0.0:
            label = f"loss {agg['fault_loss']:.0%} rotor {agg['fault_rotor']}"
        else:
            label = f"mass {agg['mass']}"
        line = (f"{agg['method']:28s} {label:22s} "
                f"success {agg['success_rate']:5.1f}%")
        time_s = agg["mean_completion_time"]
        if time_s == time_s:  # skip the mean on all-failure groups (nan)
            line += f"  mean time {time_s:.3f}s"
        print(line)
    if args.out:
        print(f"report: {os.path.join(args.out, 'report.csv')}")
    return 0


def cmd_bench(args) -> int:
    seed = env_seed()
    if seed is not None:
        args.seed = seed
    if args.suite:
        results = throughput_suite(n_workers=args.workers, seed=args.seed,
                                   progress=True)
        if args.report:
            eff = write_report(results, args.report)
            print(f"report: {args.report} (parallel efficiency {eff:.3f})")
        return 0
    r = measure_throughput(args.envs, args.steps, n_workers=args.workers,
                           seed=args.seed)
    print(f"{r['env_steps_per_sec']:,.0f} env steps/sec "
          f"({r['n_envs']} envs x {r['steps']} steps, "
          f"{r['n_workers']} worker(s), {r['us_per_env_step']:.2f} "
          "us/env-step)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = parse_extra_overrides(extra)
        if args.command == "train":
            return cmd_train(args, overrides)
        if args.command == "eval":
            return cmd_eval(args, overrides)
        if args.command == "bench-throughput":
            if overrides:
                raise CliError(
                    f"unknown flag --{overrides[0][0]} for bench-throughput")
            return cmd_bench(args)
        if args.command == "inspect-checkpoint":
            if overrides:
                raise CliError(
                    f"unknown flag --{overrides[0][0]} for inspect-checkpoint")
            print(inspect_checkpoint(args.path))
            return 0
        raise CliError(f"unknown command {args.command!r}")
    except CliError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, CheckpointMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
