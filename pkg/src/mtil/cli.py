"""Command line entry point: ``mtil <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 bad usage (argparse), 3 invalid config.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .data import Dataset, export_csv, read_dataset, write_dataset
from .envs import LIFELONG_TASKS, generate_demos, make_env
from .evaluate import AblationSettings, Report, evaluate_policy, fingerprint, run_ablation, run_lifelong
from .infer import AggregationConfig, rollout
from .policy import PRESETS, load_checkpoint, preset, save_checkpoint
from .train import EwcConfig, TrainConfig, train, write_log

EXIT_USAGE = 2
EXIT_CONFIG = 3


class ConfigError(ValueError):
    pass


# keys accepted in a key=value config file, with their parsers
TRAIN_KEYS = {
    "epochs": int,
    "lr0": float,
    "weight_decay": float,
    "loss": str,
    "history_reset_interval": int,
    "grad_clip": float,
    "seed": int,
    "mode": str,
    "ewc_lambda": float,
    "fisher_samples": int,
}
POLICY_KEYS = {
    "preset": str,
    "chunk_K": int,
    "d_model": int,
    "d_state": int,
    "n_layers": int,
    "head_kind": str,
    "gmm_components": int,
    "backbone": str,
}


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        parser = TRAIN_KEYS.get(key) or POLICY_KEYS.get(key)
        if parser is None:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        if value.lower() == "none":
            out[key] = None
            continue
        try:
            out[key] = parser(value)
        except ValueError as e:
            raise ConfigError(f"{path}:{n}: bad value for {key}: {value!r}") from e
    return out


def build_configs(values: dict, obs_dim: int, action_dim: int):
    """Split merged settings into (PolicyConfig, TrainConfig)."""
    v = dict(values)
    name = v.pop("preset", None) or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    lam = v.pop("ewc_lambda", None)
    samples = v.pop("fisher_samples", None)
    pol = {k: v.pop(k) for k in list(v) if k in POLICY_KEYS and v[k] is not None}
    tr = {k: val for k, val in v.items() if k in TRAIN_KEYS and (val is not None or k == "history_reset_interval")}
    if pol.get("head_kind") == "gmm":
        pol.setdefault("chunk_K", 1)
        tr.setdefault("loss", "gmm-nll")
    if lam is not None:
        tr["ewc"] = EwcConfig(lam=lam, fisher_samples=samples or EwcConfig.fisher_samples)
    try:
        pc = preset(name, obs_dim, action_dim, **pol)
        tc = TrainConfig(**tr)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return pc, tc


def _settings(args, flag_map: dict) -> dict:
    """Config-file values overlaid with any flags given on the command line."""
    values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    return values


def _agg_gamma(mode: str, K: int, head: str, gamma: float) -> AggregationConfig:
    if mode == "auto":
        enabled = head == "linear-chunk" and K > 1
    else:
        enabled = mode == "on"
    try:
        return AggregationConfig(enabled=enabled, gamma=gamma, K=K)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _emit(report: Report, out: str | None) -> None:
    print(report.to_text(), end="")
    if out:
        report.save(out)
        print(f"report written to {out}")


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    env = make_env(args.env)
    ds = generate_demos(env, args.n, args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} trajectories to {args.out}")
    if args.csv:
        export_csv(ds, args.csv)
    return 0


TRAIN_FLAGS = {
    "preset": "preset", "K": "chunk_K", "epochs": "epochs", "lr": "lr0", "reset_interval": "history_reset_interval",
    "head": "head_kind", "backbone": "backbone", "seed": "seed", "mode": "mode", "ewc_lambda": "ewc_lambda",
}


def cmd_train(args) -> int:
    values = _settings(args, TRAIN_FLAGS)
    ds = read_dataset(args.data)
    pc, tc = build_configs(values, ds.obs_dim, ds.action_dim)

    def progress(rec):
        logging.info("epoch %d/%d loss %.6f", rec.epoch, tc.epochs, rec.loss)

    policy, history = train(ds, tc, pc, on_epoch=progress)
    env_id = ds[0].task_id if len(ds) else ""
    meta = {"env": env_id, "train": tc.to_dict(), "data": fingerprint(Path(args.data).read_bytes())}
    save_checkpoint(policy, args.out, meta)
    log_path = args.log or f"{args.out}.log.csv"
    write_log(history, log_path)
    final = history[-1].loss if history else float("nan")
    print(f"trained {policy.n_params()} parameters, final loss {final:.6g}; checkpoint {args.out}, log {log_path}")
    return 0


def cmd_eval(args) -> int:
    policy, meta = load_checkpoint(args.ckpt)
    env_id = args.env or meta.get("env")
    if not env_id:
        raise ConfigError("no --env given and the checkpoint does not record one")
    c = policy.config
    agg = _agg_gamma(args.aggregate, c.chunk_K, c.head_kind, args.gamma)
    method = args.method or Path(args.ckpt).stem
    res = evaluate_policy(policy, env_id, method, args.episodes, args.seed, agg, args.workers)
    report = Report([res], notes={"aggregation": dataclasses.asdict(agg)})
    _emit(report, args.out)
    if args.dump:
        env = make_env(env_id)
        trajs = [rollout(policy, env, agg, args.seed + i)[0] for i in range(args.episodes)]
        write_dataset(Dataset(env.spec.obs_dim, env.spec.action_dim, trajs), args.dump)
    return 0


def cmd_ablate(args) -> int:
    overrides = {}
    if args.config:
        values = parse_config_file(args.config)
        overrides = {k: v for k, v in values.items() if k in POLICY_KEYS and k != "preset" and k != "chunk_K"}
    try:
        s = AblationSettings(
            env_id=args.env, n_demos=args.demos, chunk_K=args.K, epochs=args.epochs, lr0=args.lr,
            episodes=args.episodes, gamma=args.gamma, aggregate=args.aggregate != "off", seed=args.seed,
            short_history=args.short_history, policy_overrides=overrides,
        )
        make_env(s.env_id)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    _emit(run_ablation(s, args.workers), args.out)
    return 0


def cmd_lifelong(args) -> int:
    values = _settings(args, {"epochs": "epochs", "lr": "lr0", "K": "chunk_K", "seed": "seed"})
    tasks = args.tasks.split(",") if args.tasks else list(LIFELONG_TASKS)
    try:
        envs = [make_env(t) for t in tasks]
    except ValueError as e:
        raise ConfigError(str(e)) from e
    pc, tc = build_configs(values, envs[0].spec.obs_dim, envs[0].spec.action_dim)
    seed = tc.seed
    report = Report(notes={"fwt_definition": "mean over i>=2 of A[i-1][i] - A_base[i]",
                           "base_epochs": args.base_epochs})
    variants = [None, EwcConfig(lam=args.ewc_lambda)] if args.ewc == "both" else (
        [EwcConfig(lam=args.ewc_lambda)] if args.ewc == "on" else [None])
    for ewc in variants:
        cfg = dataclasses.replace(tc, ewc=ewc)
        res = run_lifelong(tasks, pc, cfg, args.demos, args.episodes, seed, args.base_epochs)
        d = res.to_dict()
        d["seed"] = seed
        d["fingerprint"] = fingerprint(pc.to_dict(), cfg.to_dict(), tasks, seed, args.demos, args.episodes)
        report.lifelong.append(d)
    _emit(report, args.out)
    return 0


def cmd_report(args) -> int:
    report = Report.load(args.report)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.text:
        Path(args.text).write_text(report.to_text())
    print(report.to_text(), end="")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtil", description="Recurrent chunking imitation learning on toy memory tasks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--env", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also export one CSV per trajectory into this directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="key=value settings file; flags override it")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--K", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--reset-interval", type=int)
    t.add_argument("--head", choices=["linear-chunk", "gmm"])
    t.add_argument("--backbone", choices=["mamba", "mlp"])
    t.add_argument("--mode", choices=["scan", "step"])
    t.add_argument("--ewc-lambda", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="seeded success rate of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", help="defaults to the environment recorded at training time")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0, help="base seed; episode i uses seed+i")
    e.add_argument("--aggregate", choices=["auto", "on", "off"], default="auto")
    e.add_argument("--gamma", type=float, default=0.9)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--method", help="row label (default: checkpoint file stem)")
    e.add_argument("--out", help="write the report as JSON")
    e.add_argument("--dump", help="write the evaluation rollouts as a dataset file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="full vs short-history vs memoryless comparison")
    a.add_argument("--env", required=True)
    a.add_argument("--demos", type=int, default=100)
    a.add_argument("--K", type=int, default=8)
    a.add_argument("--epochs", type=int, default=60)
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--episodes", type=int, default=100)
    a.add_argument("--gamma", type=float, default=0.9)
    a.add_argument("--aggregate", choices=["on", "off"], default="on")
    a.add_argument("--short-history", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--config", help="key=value policy settings (architecture keys only)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    l = sub.add_parser("lifelong", help="sequential multi-task training with FWT/NBT/AUC")
    l.add_argument("--tasks", help="comma-separated env ids (default: the cue-recall family)")
    l.add_argument("--ewc", choices=["off", "on", "both"], default="both")
    l.add_argument("--ewc-lambda", type=float, default=100.0)
    l.add_argument("--demos", type=int, default=50)
    l.add_argument("--episodes", type=int, default=100)
    l.add_argument("--base-epochs", type=int, default=0)
    l.add_argument("--epochs", type=int)
    l.add_argument("--lr", type=float)
    l.add_argument("--K", type=int)
    l.add_argument("--seed", type=int)
    l.add_argument("--config")
    l.add_argument("--out")
    l.set_defaults(func=cmd_lifelong)

    r = sub.add_parser("report", help="render a saved report")
    r.add_argument("report")
    r.add_argument("--csv")
    r.add_argument("--text")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"mtil: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"mtil: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
