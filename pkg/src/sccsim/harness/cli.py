"""Command-line entry point.

Subcommands: gen-data, train-codec, train-rate, simulate, sweep,
report-allocation. Every run resolves its configuration from built-in
scenario presets, an optional YAML config file (--config), and explicit
flags (highest precedence), then writes the resolved snapshot next to its
outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..codec import OfflineDataset, TrainOpts
from ..rate_policy import PpoOpts
from . import export, models as model_io, sweep as sweep_mod, train
from .config import ExperimentConfig, PRESETS, load_config
from .simulate import build_models, run_episode


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="single seed (overrides config seeds)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--scenario", choices=sorted(PRESETS), default=None)
    p.add_argument("--world-seed", type=int, default=None)


def _resolve(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = {
        "scenario": args.scenario,
        "out_dir": args.out,
        "world_seed": getattr(args, "world_seed", None),
    }
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if extra:
        overrides.update(extra)
    return load_config(args.config, overrides)


def _snapshot(config: ExperimentConfig, out_dir: Path, command: str):
    export.write_json(out_dir / "config_snapshot.json", {
        "command": command,
        "version": __version__,
        "config": config.to_dict(),
    })


def _train_opts(config: ExperimentConfig, level: int) -> TrainOpts:
    opts = train.desk_train_opts(config.scenario, level)
    for key, val in (config.train.get("codec") or {}).items():
        if not hasattr(opts, key):
            raise ValueError(f"unknown codec training option {key!r}")
        setattr(opts, key, type(getattr(opts, key))(val))
    return opts


def _ppo_opts(config: ExperimentConfig) -> PpoOpts:
    opts = train.desk_ppo_opts()
    for key, val in (config.train.get("ppo") or {}).items():
        if not hasattr(opts, key):
            raise ValueError(f"unknown ppo option {key!r}")
        setattr(opts, key, type(getattr(opts, key))(val))
    return opts


def cmd_gen_data(args) -> int:
    config = _resolve(args)
    out_dir = Path(config.out_dir)
    dataset = train.make_offline_dataset(
        config.scenario, sensor_idx=args.sensor, n_episodes=args.episodes,
        horizon=args.slots, seed=config.seeds[0], world_seed=config.world_seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"dataset_{config.scenario}_s{args.sensor}.npz"
    dataset.save(path)
    _snapshot(config, out_dir, "gen-data")
    print(f"wrote {path} ({dataset.n_episodes} episodes x {dataset.n_slots} slots)")
    return 0


def cmd_train_codec(args) -> int:
    config = _resolve(args, {"level": args.level, "variant": args.variant})
    out_dir = Path(config.out_dir)
    train_seed = config.seeds[0]
    dataset = None
    if args.level in (1, 2):
        if args.dataset:
            dataset = OfflineDataset.load(args.dataset)
        else:
            dataset = train.make_offline_dataset(
                config.scenario, sensor_idx=args.sensor, world_seed=config.world_seed,
            )
    opts = _train_opts(config, args.level)
    codec, history = train.train_sensor_codec(
        config.scenario, args.level, args.variant, train_seed,
        sensor_idx=args.sensor, dataset=dataset, opts=opts, world_seed=config.world_seed,
    )
    path = out_dir / f"codec_L{args.level}_{args.variant}_sensor{args.sensor}_seed{train_seed}.ckpt"
    model_io.save_codec(path, codec, args.level, train_seed, len(history))
    export.write_csv(out_dir / (path.stem + "_loss.csv"), ["step", "loss"],
                     [{"step": i, "loss": v} for i, v in enumerate(history)])
    _snapshot(config, out_dir, "train-codec")
    print(f"wrote {path} (final loss {history[-1]:.6g})")
    return 0


def cmd_train_rate(args) -> int:
    config = _resolve(args, {"level": args.level, "budget": args.budget})
    out_dir = Path(config.out_dir)
    codec_paths = args.codecs.split(",") if args.codecs else list(config.codec_checkpoints)
    spec = config.spec
    if len(codec_paths) != spec.n_sensors:
        raise SystemExit(f"train-rate needs {spec.n_sensors} codec checkpoints, got {len(codec_paths)}")
    codecs = [model_io.load_codec(p, expect={"level": args.level})[0] for p in codec_paths]
    train_seed = config.seeds[0]
    policy, history = train.train_rate_policy_run(
        config.scenario, args.level, codecs, args.budget, train_seed,
        opts=_ppo_opts(config), world_seed=config.world_seed,
    )
    path = out_dir / f"policy_L{args.level}_budget{args.budget:g}_seed{train_seed}.ckpt"
    model_io.save_policy(path, policy, args.level, args.budget, train_seed, len(history))
    export.write_csv(out_dir / (path.stem + "_history.csv"),
                     ["iteration", "mean_reward", "mean_bits"], history)
    _snapshot(config, out_dir, "train-rate")
    print(f"wrote {path} (final mean reward {history[-1]['mean_reward']:.6g})")
    return 0


def _metric_columns(n_sensors: int) -> list[str]:
    cols = ["t", "recon_err", "est_err", "lqr_cost"]
    cols += [f"bits_s{i+1}" for i in range(n_sensors)]
    cols += ["bits_total", "queue_v"]
    cols += [f"state_s{i+1}" for i in range(n_sensors)]
    return cols


def write_episode_csvs(out_dir: Path, seed: int, record, traj, n_sensors: int, n_x: int):
    rows = []
    for t in range(record.horizon):
        row = {
            "t": t + 1,
            "recon_err": float(record.recon_err[t]),
            "est_err": float(record.est_err[t]),
            "lqr_cost": float(record.stage_cost[t]),
            "bits_total": int(record.bits[t].sum()),
            "queue_v": float(record.queue_v[t]),
        }
        for i in range(n_sensors):
            row[f"bits_s{i+1}"] = int(record.bits[t, i])
            row[f"state_s{i+1}"] = record.sensor_states[t][i]
        rows.append(row)
    export.write_csv(out_dir / f"metrics_seed{seed}.csv", _metric_columns(n_sensors), rows)

    traj_cols = ["t"]
    for group in ("x_true", "x_hat", "x_desired"):
        traj_cols += [f"{group}_{i}" for i in range(n_x)]
    traj_rows = []
    for t in range(record.horizon):
        row = {"t": t + 1}
        for group in ("x_true", "x_hat", "x_desired"):
            for i in range(n_x):
                row[f"{group}_{i}"] = float(traj[group][t, i])
        traj_rows.append(row)
    export.write_csv(out_dir / f"trajectory_seed{seed}.csv", traj_cols, traj_rows)


def cmd_simulate(args) -> int:
    extra = {"rate_mode": args.mode, "level": args.level, "budget": args.budget}
    if args.codecs:
        extra["codec_checkpoints"] = tuple(args.codecs.split(","))
    if args.policy:
        extra["policy_checkpoint"] = args.policy
    config = _resolve(args, {k: v for k, v in extra.items() if v is not None})
    out_dir = Path(config.out_dir)
    models = build_models(config)
    spec = config.spec
    summaries = []
    for seed in config.seeds:
        record, traj = run_episode(config, models, seed)
        write_episode_csvs(out_dir, seed, record, traj, spec.n_sensors, models.model.n_x)
        summaries.append({"seed": seed, **record.summary()})
    export.write_json(out_dir / "summary.json", {"episodes": summaries})
    _snapshot(config, out_dir, "simulate")
    for s in summaries:
        print(
            f"seed {s['seed']}: lqr={s['lqr_cost_mean']:.6g} est={s['est_err_mean']:.6g} "
            f"recon={s['recon_err_mean']:.6g} bits/slot={s['bits_per_slot_mean']:.4g} "
            f"diverged={s['diverged']}"
        )
    return 0


def cmd_sweep(args) -> int:
    config = _resolve(args, {"level": args.level})
    out_dir = Path(config.out_dir)
    budgets = [float(b) for b in args.budgets.split(",")]
    modes = args.modes.split(",")
    policy_paths = {}
    for pair in args.policy_for_budget or []:
        b, _, path = pair.partition("=")
        policy_paths[float(b)] = path
    if args.codecs:
        config = dataclasses.replace(config, codec_checkpoints=tuple(args.codecs.split(",")))
    rows = sweep_mod.sweep_budgets(config, budgets, modes, policy_paths or None)
    export.write_csv(out_dir / "sweep.csv", sweep_mod.SWEEP_COLUMNS, rows)
    _snapshot(config, out_dir, "sweep")
    print(f"wrote {out_dir / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def cmd_report_allocation(args) -> int:
    extra = {"rate_mode": "learned", "level": args.level, "budget": args.budget}
    if args.codecs:
        extra["codec_checkpoints"] = tuple(args.codecs.split(","))
    if args.policy:
        extra["policy_checkpoint"] = args.policy
    config = _resolve(args, {k: v for k, v in extra.items() if v is not None})
    out_dir = Path(config.out_dir)
    rows = sweep_mod.allocation_report(config)
    export.write_csv(out_dir / "allocation.csv", sweep_mod.ALLOCATION_COLUMNS, rows)
    _snapshot(config, out_dir, "report-allocation")
    print(f"wrote {out_dir / 'allocation.csv'} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sccsim", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="collect uncompressed-loop training corpora")
    _common_flags(p)
    p.add_argument("--sensor", type=int, default=0)
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--slots", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train-codec", help="train one sensor's codec")
    _common_flags(p)
    p.add_argument("--level", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--variant", choices=("gru-ae", "ae"), default="gru-ae")
    p.add_argument("--sensor", type=int, default=0)
    p.add_argument("--dataset", default=None, help="offline corpus .npz (levels 1-2)")
    p.set_defaults(func=cmd_train_codec)

    p = subs.add_parser("train-rate", help="train the bit-allocation policy")
    _common_flags(p)
    p.add_argument("--level", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--budget", type=float, default=4.0)
    p.add_argument("--codecs", default=None, help="comma-separated codec checkpoints")
    p.set_defaults(func=cmd_train_rate)

    p = subs.add_parser("simulate", help="run evaluation episodes")
    _common_flags(p)
    p.add_argument("--mode", choices=("uncompressed", "no-control", "equal", "learned"), default=None)
    p.add_argument("--level", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--codecs", default=None)
    p.add_argument("--policy", default=None)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("sweep", help="evaluate modes across budgets")
    _common_flags(p)
    p.add_argument("--level", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--budgets", default="4,8,12,16,20,24")
    p.add_argument("--modes", default="uncompressed,equal")
    p.add_argument("--codecs", default=None)
    p.add_argument("--policy-for-budget", action="append", default=None,
                   help="budget=checkpoint pairs for learned mode")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("report-allocation", help="per-sensor bits by schedule window")
    _common_flags(p)
    p.add_argument("--level", type=int, choices=(1, 2, 3), default=None)
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--codecs", default=None)
    p.add_argument("--policy", default=None)
    p.set_defaults(func=cmd_report_allocation)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
