"""Single executable: dataset generation, offline pretraining plus online
fine-tuning, diagnostics probes, and tidy plot-data export.

Everything is driven by a JSON config with strict schema validation (unknown
keys are rejected) and full seed control; every run directory carries a
manifest echoing the fully-materialized config so runs can be reproduced
byte-for-byte.

Exit codes: 0 ok, 2 usage, 3 numeric abort, 4 missing artifact, 5 schema
mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import action_opt as ao
from . import baselines as bl
from . import critics as cr
from . import env as envmod
from . import numerics as nm
from . import policies as po
from . import training as tr

logger = logging.getLogger("parl.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4
EXIT_SCHEMA = 5

ARMS = ("full", "no_global", "no_local", "sil", "cem_scratch", "cem_policy")


def _setup_logging() -> None:
    level = os.environ.get("PARL_LOG_LEVEL", "warn").lower()
    mapping = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=mapping.get(level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


# -- config schema ------------------------------------------------------------------

@dataclass
class MazeConfig:
    name: str = "large"
    max_episode_steps: int | None = None
    action_scale: float | None = None

    def build(self) -> envmod.PointMazeSpec:
        if self.name not in envmod.MAZES:
            raise ValueError(f"unknown maze {self.name!r}")
        spec = envmod.MAZES[self.name]
        overrides = {}
        if self.max_episode_steps is not None:
            overrides["max_episode_steps"] = self.max_episode_steps
        if self.action_scale is not None:
            overrides["action_scale"] = self.action_scale
        return dataclasses.replace(spec, **overrides) if overrides else spec


@dataclass
class DatasetConfig:
    regime: str = "diverse"
    episodes: int = 150
    noise_level: float = 1.0
    seed: int = 7
    path: str | None = None


@dataclass
class PolicyConfig:
    kind: str = "diffusion_ddpm"
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    n_diffusion_steps: int = 5
    n_bins: int = 128
    activation: str = "relu"


@dataclass
class HeadConfig:
    kind: str = "scalar"
    n_bins: int = 51
    v_min: float = -120.0
    v_max: float = 0.0
    sigma: float | None = None

    def build(self) -> cr.CriticHead:
        return cr.CriticHead(self.kind, self.n_bins, self.v_min, self.v_max,
                             self.sigma)


@dataclass
class CriticConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    ensemble_size: int = 2
    subsample_size: int = 2
    polyak_tau: float = 0.005
    activation: str = "relu"
    head: HeadConfig = field(default_factory=HeadConfig)
    cql_alpha: float = 0.005
    backup_mode: str = "expectation"
    bellman_actions: str = "optimized"
    discount: float = 0.99
    iql_expectile: float = 0.7


@dataclass
class ActionOptFields:
    n_samples: int = 32
    top_m: int = 10
    n_grad_steps: int = 10
    step_size: float = 3e-4
    include_dataset_action: bool = True
    selection: str = "auto"
    selection_threshold: float = 0.1
    accept_test: bool = True

    def build(self) -> ao.ActionOptConfig:
        return ao.ActionOptConfig(**dataclasses.asdict(self))


@dataclass
class TrainFields:
    algorithm: str = "calql_parl"
    offline_grad_steps: int = 2000
    bc_grad_steps: int = 2000
    online_env_episodes: int = 200
    warmup_episodes: int = 20
    utd_ratio: int | None = None
    eval_every: int = 25
    eval_episodes: int = 32
    distill_lr: float = 5e-5
    critic_lr: float = 3e-4
    batch_size: int = 256
    mixing_ratio: float = 0.5
    distill_every_episodes: int = 10
    distill_every_steps: int = 10000
    distill_epochs: int = 1
    distill_batch_size: int = 256
    distill_max_states: int = 0

    def build(self, seed: int, iql_expectile: float) -> tr.TrainLoopConfig:
        kwargs = dataclasses.asdict(self)
        return tr.TrainLoopConfig(seed=seed, iql_expectile=iql_expectile,
                                  **kwargs)


@dataclass
class ExperimentConfig:
    maze: MazeConfig = field(default_factory=MazeConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    action_opt: ActionOptFields = field(default_factory=ActionOptFields)
    train: TrainFields = field(default_factory=TrainFields)
    arm: str = "full"
    reward_bias: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None

    def __post_init__(self) -> None:
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}")


class ConfigError(ValueError):
    """Config file violates the schema."""


# Fields that may be null in the JSON, and nested object fields by name
# (field annotations are strings under `from __future__ import annotations`).
_NULLABLE = {"max_episode_steps", "utd_ratio", "action_scale", "sigma",
             "path", "out"}
_NESTED = {"maze": MazeConfig, "dataset": DatasetConfig, "policy": PolicyConfig,
           "head": HeadConfig, "critic": CriticConfig,
           "action_opt": ActionOptFields, "train": TrainFields}


def _from_dict(dc_type, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    field_map = {f.name: f for f in dataclasses.fields(dc_type)}
    unknown = set(data) - set(field_map)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        spot = f"{where}.{name}"
        if name in _NESTED:
            kwargs[name] = _from_dict(_NESTED[name], value, spot)
        elif value is None:
            if name not in _NULLABLE:
                raise ConfigError(f"{spot}: null not allowed")
            kwargs[name] = None
        elif isinstance(value, (bool, int, float, str)):
            kwargs[name] = value
        elif isinstance(value, list):
            kwargs[name] = list(value)
        else:
            raise ConfigError(f"{spot}: unsupported value {value!r}")
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = json.load(fh)
    if "config" in data and "seed" in data and "maze" not in data:
        # a run manifest: unwrap and pin its seed
        config = config_from_dict(data["config"])
        config.seeds = [int(data["seed"])]
        return config
    return config_from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True)


# -- experiment assembly --------------------------------------------------------------

def _prepare_dataset(config: ExperimentConfig,
                     require_file: bool = False) -> tuple[envmod.Dataset, envmod.PointMazeSpec]:
    spec = config.maze.build()
    dc = config.dataset
    if dc.path is not None and Path(dc.path).exists():
        dataset, _ = envmod.load_dataset(dc.path)
    elif require_file and dc.path is not None:
        raise FileNotFoundError(f"dataset file {dc.path} not found")
    else:
        dataset = envmod.generate_dataset(spec, dc.regime, dc.episodes,
                                          dc.noise_level, dc.seed)
    if config.reward_bias:
        dataset = envmod.bias_rewards(dataset, config.reward_bias)
    dataset = envmod.annotate_mc_returns(dataset, config.critic.discount)
    return dataset, spec


def _build_components(config: ExperimentConfig, spec, seed: int):
    rng = tr.stream(seed, "init")
    policy = po.make_policy(
        config.policy.kind, state_dim=2, d_action=2, rng=rng,
        hidden=tuple(config.policy.hidden),
        n_diffusion_steps=config.policy.n_diffusion_steps,
        n_bins=config.policy.n_bins, activation=config.policy.activation)
    cc = config.critic
    critic = cr.make_critic(
        2, 2, rng, hidden=tuple(cc.hidden), ensemble_size=cc.ensemble_size,
        subsample_size=cc.subsample_size, head=cc.head.build(),
        polyak_tau=cc.polyak_tau, activation=cc.activation)
    valuenet = None
    if config.train.algorithm == "iql_parl":
        valuenet = cr.make_value_net(2, rng, hidden=tuple(cc.hidden),
                                     expectile_tau=cc.iql_expectile,
                                     activation=cc.activation)
    calql_cfg = cr.CalQlConfig(cc.cql_alpha, cc.backup_mode, cc.discount,
                               cc.bellman_actions)
    return policy, critic, valuenet, calql_cfg


def _arm_behavior(config: ExperimentConfig, policy, critic, spec,
                  action_cfg, calql_cfg, train_cfg):
    """Per-arm acting and policy-update overrides for the training loop."""
    arm = config.arm
    actor = None
    on_policy_update = None
    if arm in ("no_global", "no_local"):
        action_cfg = bl.ablation_config(action_cfg, arm)
    elif arm == "sil":
        sil_cfg = bl.SilConfig(lr=train_cfg.distill_lr,
                               epochs=train_cfg.distill_epochs,
                               batch_size=train_cfg.distill_batch_size)
        sil_adam = nm.adam_init(policy.params,
                                learning_rate=train_cfg.distill_lr)

        def actor(state, rng):
            obs = envmod.normalize_state(spec, state)
            return po.policy_sample(policy, obs, 1, rng)[0]

        def on_policy_update(buffer, round_idx):
            _, stats = bl.sil_distill(policy, critic, None, buffer, sil_cfg,
                                      spec=spec,
                                      rng=tr.stream(train_cfg.seed, "sil",
                                                    round_idx),
                                      adam_state=sil_adam)
            return stats["mean_loss"]

    elif arm in ("cem_scratch", "cem_policy"):
        cem_cfg = bl.CemConfig(
            init="uniform_random" if arm == "cem_scratch" else "frozen_policy")

        def actor(state, rng):
            obs = envmod.normalize_state(spec, state)
            return bl.cem_optimize(critic, obs, cem_cfg, rng,
                                   seed_policy=policy)

        def on_policy_update(buffer, round_idx):
            return 0.0        # CEM arms never train the policy

    return action_cfg, actor, on_policy_update


def _checkpoint_paths(run_dir: Path, episodes: int) -> tuple[Path, Path]:
    return (run_dir / f"policy_ep{episodes:05d}.bin",
            run_dir / f"critic_ep{episodes:05d}.bin")


def run_experiment(config: ExperimentConfig, seed: int,
                   out_dir: Path | None = None, workers: int = 1,
                   dataset: envmod.Dataset | None = None,
                   spec: envmod.PointMazeSpec | None = None) -> dict:
    """One seed end to end: pretrain, fine-tune, metrics, checkpoints."""
    if dataset is None or spec is None:
        dataset, spec = _prepare_dataset(config)
    policy, critic, valuenet, calql_cfg = _build_components(config, spec, seed)
    action_cfg = config.action_opt.build()
    train_cfg = config.train.build(seed, config.critic.iql_expectile)
    cache = tr.ActionCache(seed=seed, n_samples=action_cfg.n_samples)
    action_cfg, actor, on_policy_update = _arm_behavior(
        config, policy, critic, spec, action_cfg, calql_cfg, train_cfg)

    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
    metrics = tr.MetricsWriter(metrics_path)

    checkpoint_fn = None
    if out_dir is not None:
        def checkpoint_fn(episodes: int) -> None:
            p_path, c_path = _checkpoint_paths(out_dir, episodes)
            po.save_policy(p_path, policy)
            cr.save_critic(c_path, critic, valuenet)

    hybrid = train_cfg.algorithm == "hybrid_parl"
    offline_cfg = train_cfg if not hybrid else \
        dataclasses.replace(train_cfg, offline_grad_steps=0)
    policy, critic, carry = tr.pretrain_offline(
        offline_cfg, dataset, policy, critic, valuenet=valuenet,
        action_cfg=action_cfg, calql_cfg=calql_cfg, spec=spec,
        cache=cache, workers=workers)
    rows = tr.finetune_online(
        train_cfg, spec, policy, critic, carry["buffer"], valuenet=valuenet,
        action_cfg=action_cfg, calql_cfg=calql_cfg, cache=cache,
        metrics=metrics, workers=workers,
        carry=carry if not hybrid else None,
        actor=actor, on_policy_update=on_policy_update,
        checkpoint_fn=checkpoint_fn)

    result = {"rows": rows, "policy": policy, "critic": critic,
              "valuenet": valuenet, "spec": spec, "dataset": dataset,
              "cache": cache, "action_cfg": action_cfg,
              "calql_cfg": calql_cfg}
    if out_dir is not None:
        manifest = {
            "config": config_to_dict(config),
            "seed": seed,
            "arm": config.arm,
            "package_version": __version__,
            "checkpoint_hashes": _hash_checkpoints(out_dir),
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return result


def _hash_checkpoints(run_dir: Path) -> dict:
    hashes = {}
    for path in sorted(run_dir.glob("*.bin")):
        hashes[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return hashes


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(args, parser) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.regime:
        config.dataset.regime = args.regime
    if args.episodes is not None:
        config.dataset.episodes = args.episodes
    if args.seed is not None:
        config.dataset.seed = args.seed
    if args.noise is not None:
        config.dataset.noise_level = args.noise
    if config.dataset.episodes < 1:
        parser.error("--episodes must be >= 1")
    out = Path(args.out or config.dataset.path or "dataset.bin")
    if out.exists() and not args.force:
        print(f"refusing to overwrite {out} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    spec = config.maze.build()
    dataset = envmod.generate_dataset(spec, config.dataset.regime,
                                      config.dataset.episodes,
                                      config.dataset.noise_level,
                                      config.dataset.seed)
    dataset = envmod.annotate_mc_returns(dataset, config.critic.discount)
    out.parent.mkdir(parents=True, exist_ok=True)
    envmod.save_dataset(out, dataset, config.critic.discount)
    coverage = envmod.action_coverage(dataset)
    success = envmod.dataset_success_rate(dataset)
    print(f"wrote {out}: {len(dataset)} transitions, "
          f"{len(dataset.episodes)} episodes, regime={dataset.coverage_tag}, "
          f"action_coverage={coverage:.3f}, behavior_success={success:.3f}")
    return EXIT_OK


def _aggregate_rows(per_seed_rows: dict[int, list[dict]]) -> list[dict]:
    """Across-seed mean and standard error per evaluation point."""
    episodes = sorted({row["episodes"] for rows in per_seed_rows.values()
                       for row in rows})
    out = []
    for ep in episodes:
        values = {"success_rate": [], "mean_return": []}
        for rows in per_seed_rows.values():
            for row in rows:
                if row["episodes"] == ep:
                    values["success_rate"].append(row["success_rate"])
                    values["mean_return"].append(row["mean_return"])
        entry = {"episodes": ep}
        for metric, vals in values.items():
            arr = np.asarray(vals, dtype=np.float64)
            entry[f"{metric}_mean"] = float(arr.mean())
            entry[f"{metric}_stderr"] = float(
                arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
        out.append(entry)
    return out


def _write_aggregate(path: Path, aggregate: list[dict]) -> None:
    columns = ("episodes", "success_rate_mean", "success_rate_stderr",
               "mean_return_mean", "mean_return_stderr")
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in aggregate:
            fh.write(",".join(tr.MetricsWriter._fmt(row[c]) for c in columns)
                     + "\n")


def cmd_train(args, parser) -> int:
    if not args.config:
        parser.error("train requires --config")
    config = load_config(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
    if args.seeds is not None:
        config.seeds = list(range(args.seeds))
    if args.out:
        config.out = args.out
    out_root = Path(config.out or "runs/run")
    if config.dataset.path is not None and not Path(config.dataset.path).exists():
        print(f"dataset file {config.dataset.path} not found; "
              "run gen-data first", file=sys.stderr)
        return EXIT_MISSING
    dataset, spec = _prepare_dataset(config)
    per_seed_rows = {}
    for seed in config.seeds:
        run_dir = out_root / f"seed_{seed}"
        try:
            result = run_experiment(config, seed, out_dir=run_dir,
                                    workers=args.workers, dataset=dataset,
                                    spec=spec)
        except tr.TrainingDiverged as exc:
            print(f"seed {seed}: {exc}; last checkpoint kept in {run_dir}",
                  file=sys.stderr)
            return EXIT_NUMERIC
        per_seed_rows[seed] = result["rows"]
    if len(config.seeds) >= 1:
        _write_aggregate(out_root / "aggregate.csv",
                         _aggregate_rows(per_seed_rows))
    print(f"completed {len(config.seeds)} run(s) under {out_root}")
    return EXIT_OK


def _latest_checkpoints(run_dir: Path) -> tuple[Path, Path]:
    policies = sorted(run_dir.glob("policy_ep*.bin"))
    critics = sorted(run_dir.glob("critic_ep*.bin"))
    if not policies or not critics:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    return policies[-1], critics[-1]


def cmd_probe(args, parser) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        print(f"missing manifest {manifest_path}", file=sys.stderr)
        return EXIT_MISSING
    try:
        p_path, c_path = _latest_checkpoints(run_dir)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    config = config_from_dict(manifest["config"])
    spec = config.maze.build()
    policy = po.load_policy(p_path)
    critic, _ = cr.load_critic(c_path)
    action_cfg = config.action_opt.build()
    out = Path(args.out or (run_dir / f"probe_{args.probe}.csv"))
    if args.probe == "overestimation":
        records = bl.overestimation_probe(
            critic, args.source, spec, args.rollouts,
            config.critic.discount, policy=policy, action_cfg=action_cfg,
            seed=manifest["seed"])
        with open(out, "w") as fh:
            fh.write("step,source,q_predicted,mc_return,gap\n")
            for r in records:
                fh.write(f"{r.step},{args.source},{r.q_predicted!r},"
                         f"{r.mc_return!r},{r.gap!r}\n")
        gaps = [r.gap for r in records]
        print(f"wrote {out}: mean gap {np.mean(gaps):.3f} over "
              f"{len(records)} rollouts")
    elif args.probe == "action-stats":
        dataset, _ = _prepare_dataset(config)
        rng = tr.stream(manifest["seed"], "action-stats")
        states = dataset.states()
        pick = rng.choice(len(states), size=min(args.rollouts, len(states)),
                          replace=False)
        rows = []
        for idx in pick:
            obs = envmod.normalize_state(spec, states[idx])
            before = ao.global_optimize(policy, critic, obs, action_cfg, rng)
            rows_s = np.repeat(before.state[None, :], len(before), axis=0)
            after_actions, _ = ao._local_optimize_rows(
                critic, rows_s, before.actions, before.q_values, action_cfg,
                rng=rng)
            std_before = float(before.actions.std(axis=0).mean())
            std_after = float(after_actions.std(axis=0).mean())
            l1 = float(np.abs(after_actions - before.actions)
                       .sum(axis=1).mean())
            rows.append((std_before, std_after, l1))
        with open(out, "w") as fh:
            fh.write("std_before,std_after,l1_change\n")
            for sb, sa, l1 in rows:
                fh.write(f"{sb!r},{sa!r},{l1!r}\n")
        print(f"wrote {out}: {len(rows)} probed states")
    else:
        parser.error(f"unknown probe {args.probe!r}")
    return EXIT_OK


def cmd_export_plots(args, parser) -> int:
    run_dirs = [Path(p) for p in args.runs]
    tidy_rows = []
    header_ref = None
    bad = []
    for run_dir in run_dirs:
        metrics_path = run_dir / "metrics.csv"
        manifest_path = run_dir / "manifest.json"
        if not metrics_path.exists() or not manifest_path.exists():
            bad.append(str(run_dir))
            continue
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        arm, seed = manifest.get("arm", "full"), manifest["seed"]
        with open(metrics_path) as fh:
            header = fh.readline().strip().split(",")
            if header_ref is None:
                header_ref = header
            elif header != header_ref:
                bad.append(str(metrics_path))
                continue
            for line in fh:
                values = line.strip().split(",")
                row = dict(zip(header, values))
                for metric in header:
                    if metric in ("step", "episodes"):
                        continue
                    tidy_rows.append((arm, seed, int(row["episodes"]),
                                      metric, row[metric]))
    if bad:
        print("schema mismatch or missing files: " + ", ".join(bad),
              file=sys.stderr)
        return EXIT_SCHEMA
    out = Path(args.out or "plots.csv")
    with open(out, "w") as fh:
        fh.write("arm,seed,step,metric,value\n")
        for arm, seed, step, metric, value in tidy_rows:
            fh.write(f"{arm},{seed},{step},{metric},{value}\n")
    # companion aggregate: mean and standard error per (arm, step, metric)
    groups: dict[tuple, list[float]] = {}
    for arm, seed, step, metric, value in tidy_rows:
        groups.setdefault((arm, step, metric), []).append(float(value))
    agg_path = out.with_name(out.stem + "_aggregate.csv")
    with open(agg_path, "w") as fh:
        fh.write("arm,step,metric,mean,stderr\n")
        for (arm, step, metric), vals in sorted(groups.items()):
            arr = np.asarray(vals)
            stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) \
                if len(arr) > 1 else 0.0
            fh.write(f"{arm},{step},{metric},{arr.mean()!r},{stderr!r}\n")
    print(f"wrote {out} ({len(tidy_rows)} rows) and {agg_path}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parl",
        description="Action-optimization RL toolkit on a desk-scale point maze")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate an offline dataset file")
    p_gen.add_argument("--config", help="experiment config JSON")
    p_gen.add_argument("--regime", choices=("diverse", "play"))
    p_gen.add_argument("--episodes", type=int)
    p_gen.add_argument("--noise", type=float)
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--out", help="output dataset path")
    p_gen.add_argument("--force", action="store_true")

    p_train = sub.add_parser("train", help="offline pretrain + online fine-tune")
    p_train.add_argument("--config", required=False)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--seeds", type=int,
                         help="run seeds 0..K-1 and aggregate")
    p_train.add_argument("--out")
    p_train.add_argument("--workers", type=int, default=1)

    p_probe = sub.add_parser("probe", help="diagnostics on a finished run")
    p_probe.add_argument("--run", required=True, help="run directory")
    p_probe.add_argument("--probe", required=True,
                         choices=("overestimation", "action-stats"))
    p_probe.add_argument("--source", default="parl",
                         choices=("cem", "parl", "base_policy"))
    p_probe.add_argument("--rollouts", type=int, default=20)
    p_probe.add_argument("--out")

    p_export = sub.add_parser("export-plots",
                              help="tidy long-format CSV from run dirs")
    p_export.add_argument("runs", nargs="*")
    p_export.add_argument("--out")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args, parser)
        if args.command == "train":
            return cmd_train(args, parser)
        if args.command == "probe":
            return cmd_probe(args, parser)
        if args.command == "export-plots":
            return cmd_export_plots(args, parser)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except tr.TrainingDiverged as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERIC
    parser.error("no command")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
