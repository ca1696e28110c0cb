"""Command-line entry points: train, eval, gen-tasks, plot."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .harness import (
    DataConfig,
    evaluate,
    emit_results,
    load_experiment_config,
    load_model_from_checkpoint,
    plot_from_csv,
    train,
)
from .models import ConfigError
from .taskgen import read_tasks, task_generator, write_tasks


def _cmd_train(args) -> int:
    model_cfg, train_cfg, data_cfg = load_experiment_config(args.config)
    if data_cfg is None:
        raise ConfigError("training needs a 'data' section in the config")
    if args.seed is not None:
        train_cfg.seed = args.seed
    result = train(model_cfg, train_cfg, data_cfg, args.out, resume=args.resume)
    plot_from_csv(os.path.join(args.out, "metrics.csv"), args.out)
    print(f"best checkpoint: {result.checkpoint}")
    print(f"best validation log-lik: {result.best_val_loglik:.4f}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model_from_checkpoint(args.ckpt)
    tasks = read_tasks(args.tasks)
    result = evaluate(model, tasks)
    emit_results([result.row(split="test")], args.out, per_task=result)
    print(
        f"test log-lik {result.loglik:.4f} +/- {result.loglik_stderr:.4f}, "
        f"rmse {result.rmse:.4f} +/- {result.rmse_stderr:.4f}, "
        f"fpt {result.fpt_ms:.1f} ms, params {result.params}"
    )
    return 0


def _cmd_gen_tasks(args) -> int:
    with open(args.config) as f:
        raw = json.load(f)
    unknown = set(raw) - {"data", "count", "seed"}
    if unknown:
        raise ConfigError(f"unknown gen-tasks config keys {sorted(unknown)}")
    data_cfg = DataConfig.from_dict(raw["data"])
    if data_cfg.kind == "file":
        raise ConfigError("gen-tasks needs a generator, not a file source")
    count = int(raw.get("count", 512))
    seed = int(raw.get("seed", 0))
    gen = task_generator(
        data_cfg.kind, data_cfg.gp if data_cfg.kind == "gp" else data_cfg.multisource
    )
    seeds = [
        int(np.random.SeedSequence(entropy=seed, spawn_key=(2, i)).generate_state(1)[0])
        for i in range(count)
    ]
    tasks = [gen(s) for s in seeds]
    write_tasks(args.out, tasks, generator_config=raw)
    print(f"wrote {count} tasks to {args.out}")
    return 0


def _cmd_plot(args) -> int:
    written = plot_from_csv(args.metrics, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridtnp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen-tasks", help="generate a task file from a data config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_tasks)

    p = sub.add_parser("plot", help="regenerate plots from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
