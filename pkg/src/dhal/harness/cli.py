"""``dhal`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data or shape
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from dhal import dha as dha_mod
from dhal.envs import dataset as data_mod
from dhal.envs.cart import CartConfig
from dhal.errors import ConfigError, ContractError, DataError, DimensionError, DomainError, NumericalError
from dhal.harness import config as config_mod
from dhal.harness import evaluate, export
from dhal.mcppo import train as rl
from dhal.nn.rng import RngStream, default_seed

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _experiment(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.ExperimentConfig()
    if getattr(args, "preset", None):
        cfg = config_mod.apply_overrides(cfg, config_mod.PRESETS[args.preset])
    return cfg


def _positive(name: str, value) -> None:
    if value is not None and value < 1:
        raise UsageError(f"--{name} must be >= 1, got {value}")


def _existing(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _seed(args) -> int:
    return args.seed if args.seed is not None else default_seed()


# -- subcommands -------------------------------------------------------------
def cmd_gen_data(args) -> int:
    if args.env not in data_mod.ENV_NAMES:
        raise UsageError(f"unknown env {args.env!r}; choose from {', '.join(data_mod.ENV_NAMES)}")
    _positive("episodes", args.episodes)
    _positive("steps", args.steps)
    if args.period is not None and args.period <= 0:
        raise UsageError("--period must be positive")
    ds = data_mod.generate(args.env, args.episodes, args.steps, _seed(args), period=args.period)
    checksum = data_mod.write_dataset(args.out, ds)
    _emit({"records": len(ds), "checksum": checksum, "out": args.out})
    return EXIT_OK


def cmd_train_dha(args) -> int:
    ds = data_mod.read_dataset(_existing(args.data, "dataset"))
    exp = _experiment(args)
    overrides = {"num_modes": args.modes, "lr": args.lr, "batch_size": args.batch_size}
    dha_cfg = config_mod.apply_overrides(exp, {"dha": {k: v for k, v in overrides.items() if v is not None}}).dha
    epochs = args.epochs if args.epochs is not None else exp.run.dha_epochs
    if epochs < 0:
        raise UsageError("--epochs must be >= 0")
    seed = _seed(args)
    if args.init:
        model, _ = dha_mod.load_dha(_existing(args.init, "checkpoint"))
    else:
        model = dha_mod.build_dha(dha_cfg, ds.obs_dim, ds.act_dim, ds.contact_dim, RngStream(seed).split("init", "dha"))
    dha_mod.check_dataset(model, ds)
    curve = dha_mod.train_dha(model, ds, epochs, RngStream(seed).split("train", "dha"))
    dha_mod.save_dha(args.out, model, {"epochs": epochs, "seed": seed, "dataset_env": ds.env})
    if args.curve:
        Path(args.curve).write_text(export.rows_to_csv(curve, first=("epoch",)))
    report = dha_mod.eval_prediction_mse(model, ds)
    _emit(
        {
            "final_mse": report["overall_mse"],
            "final_bce": report["overall_bce"],
            "final_loss": curve[-1]["loss"] if curve else None,
            "mode_histogram": report["mode_histogram"],
            "checkpoint": args.out,
        }
    )
    return EXIT_OK


def cmd_train_rl(args) -> int:
    exp = _experiment(args)
    ppo_over = {k: v for k, v in {"policy": args.policy, "critics": args.critics, "num_envs": args.num_envs}.items() if v is not None}
    exp = config_mod.apply_overrides(exp, {"ppo": ppo_over})
    iters = args.iters if args.iters is not None else exp.run.iterations
    every = args.checkpoint_every or exp.run.checkpoint_every
    if iters < 0:
        raise UsageError("--iters must be >= 0")
    _positive("checkpoint-every", every)
    seed = _seed(args)
    env_cfg = CartConfig(period=exp.env.period, bound=exp.env.bound)
    learner = rl.build_learner(exp.ppo, exp.dha, env_cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_mod.serialize(exp))
    log = rl.MetricsLog(out / "metrics.jsonl")
    rl.save_learner(out / "ckpt_0000.bin", learner)
    for _ in range(iters):
        log.append(rl.train_iteration(learner))
        if learner.iteration % every == 0:
            rl.save_learner(out / f"ckpt_{learner.iteration:04d}.bin", learner)
    final = rl.save_learner(out / "final.bin", learner)
    _emit({"iterations": iters, "checkpoint": str(out / "final.bin"), "checksum": final})
    return EXIT_OK


def cmd_eval_dha(args) -> int:
    model, _ = dha_mod.load_dha(_existing(args.ckpt, "checkpoint"))
    ds = data_mod.read_dataset(_existing(args.data, "dataset"))
    _emit(evaluate.eval_mode_accuracy(model, ds))
    return EXIT_OK


def cmd_eval_pred(args) -> int:
    model, meta = dha_mod.load_dha(_existing(args.ckpt, "checkpoint"))
    if args.data:
        ds = data_mod.read_dataset(_existing(args.data, "dataset"))
    else:
        if args.clock_period is None:
            raise UsageError("give --data or --clock-period to regenerate cart data")
        if args.clock_period <= 0:
            raise UsageError("--clock-period must be positive")
        _positive("episodes", args.episodes)
        _positive("steps", args.steps)
        ds = data_mod.generate("cart", args.episodes, args.steps, _seed(args), period=args.clock_period)
    report, traces = evaluate.eval_prediction_report(model, ds)
    report["clock_period"] = ds.extra.get("period")
    if args.traces:
        Path(args.traces).write_text(export.columns_to_csv(traces))
    _emit(report)
    return EXIT_OK


def cmd_export(args) -> int:
    n = export.export_metrics(_existing(args.metrics, "metrics log"), args.out)
    result = {"rows": n, "out": args.out}
    if args.hidden_ckpt:
        if not args.hidden_out:
            raise UsageError("--hidden-ckpt needs --hidden-out")
        _positive("hidden-steps", args.hidden_steps)
        learner = rl.load_learner(_existing(args.hidden_ckpt, "checkpoint"))
        dump = export.hidden_activation_dump(learner, args.hidden_steps)
        Path(args.hidden_out).write_text(export.columns_to_csv(dump))
        result["hidden_rows"] = len(dump["step"])
    _emit(result)
    return EXIT_OK


# -- parser ----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dhal", description="Discrete-time hybrid automata learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a DHAL-DATA-1 dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--steps", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--period", type=float, help="cart clock period in seconds")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-dha", help="train the hybrid automaton on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--modes", type=int, choices=(1, 2, 3, 4))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--init", help="continue from a DHA checkpoint")
    t.add_argument("--curve", help="write the per-epoch loss curve as CSV")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_dha)

    r = sub.add_parser("train-rl", help="multi-critic PPO on the cart env")
    r.add_argument("--iters", type=int)
    r.add_argument("--policy", choices=("beta", "gaussian"))
    r.add_argument("--critics", choices=rl.CRITIC_PRESETS)
    r.add_argument("--num-envs", type=int)
    r.add_argument("--checkpoint-every", type=int)
    r.add_argument("--preset", choices=sorted(config_mod.PRESETS))
    r.add_argument("--seed", type=int)
    r.add_argument("--config")
    r.add_argument("--out", required=True, help="run directory")
    r.set_defaults(func=cmd_train_rl)

    e = sub.add_parser("eval-dha", help="permutation-matched mode accuracy on labeled data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval_dha)

    q = sub.add_parser("eval-pred", help="next-observation prediction report")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data")
    q.add_argument("--clock-period", type=float)
    q.add_argument("--episodes", type=int, default=20)
    q.add_argument("--steps", type=int, default=200)
    q.add_argument("--seed", type=int)
    q.add_argument("--traces", help="write predicted-vs-actual traces as CSV")
    q.set_defaults(func=cmd_eval_pred)

    x = sub.add_parser("export", help="metrics log to CSV, optional hidden-activation dump")
    x.add_argument("--metrics", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--hidden-ckpt")
    x.add_argument("--hidden-out")
    x.add_argument("--hidden-steps", type=int, default=100)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dhal {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, DomainError, ContractError, OSError) as exc:
        print(f"dhal {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"dhal {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
