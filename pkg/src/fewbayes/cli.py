"""Command-line entry point.

Subcommands: train, eval, dump-latents, preview-schedule, gradcheck.
stdout carries machine-readable JSON only; progress and errors go to
stderr. Exit codes: 0 success, 1 usage/config error, 2 runtime error.

Report paths write a matplotlib figure next to each CSV they produce
(disable with --no-figures).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import plots, trainer
from .autodiff import finite_diff_check
from .config import TrainConfig, load_train_config
from .divergences import KernelConfig
from .episodes import SPLITS, Dataset, sample_episode
from .errors import ConfigError, FewbayesError
from .model import load_checkpoint
from .objectives import total_loss
from .schedules import ScheduleConfig, beta_at


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract here is 1.
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fewbayes", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_train = sub.add_parser("train", help="run the training loop from a JSON config")
    p_train.add_argument("--config", required=True, help="path to a train config JSON file")
    p_train.add_argument("--out-dir", default=".", help="directory for checkpoint.json / metrics.csv")
    p_train.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p_eval = sub.add_parser("eval", help="score a checkpoint on sampled tasks")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--tasks", type=int, default=600)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--split", default="meta-test", choices=SPLITS)

    p_lat = sub.add_parser("dump-latents", help="write sampled class weights to CSV (+ scatter)")
    p_lat.add_argument("--checkpoint", required=True)
    p_lat.add_argument("--tasks", type=int, default=50)
    p_lat.add_argument("--seed", type=int, default=0)
    p_lat.add_argument("--split", default="meta-test", choices=SPLITS)
    p_lat.add_argument("--out", required=True, help="latents CSV path")
    p_lat.add_argument("--no-figures", action="store_true")

    p_sched = sub.add_parser("preview-schedule", help="emit step,beta CSV for a schedule (+ figure)")
    p_sched.add_argument("--config", required=True, help="train config or bare schedule JSON")
    p_sched.add_argument("--out", required=True, help="schedule CSV path")
    p_sched.add_argument("--no-figures", action="store_true")

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of the configured objective")
    p_grad.add_argument("--config", required=True)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _log(msg: str):
    print(msg, file=sys.stderr)


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    checkpoint_path = os.path.join(args.out_dir, "checkpoint.json")
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    result = trainer.train(cfg, checkpoint_path=checkpoint_path, metrics_path=metrics_path, log=_log)
    figure_path = None
    if not args.no_figures and result.metrics_rows:
        figure_path = os.path.join(args.out_dir, "metrics.png")
        plots.render_metrics_figure(result.metrics_rows, figure_path)
    final_val = next(
        (r["val_accuracy"] for r in reversed(result.metrics_rows) if r["val_accuracy"] is not None),
        None,
    )
    _emit(
        {
            "checkpoint": checkpoint_path,
            "metrics": metrics_path,
            "figure": figure_path,
            "steps": cfg.optimizer.steps,
            "final_val_accuracy": final_val,
        }
    )
    return 0


def _load_params_and_config(path: str):
    params, config_dict, seed, step = load_checkpoint(path)
    cfg = TrainConfig.from_dict(config_dict)
    return params, cfg, seed, step


def _cmd_eval(args) -> int:
    params, cfg, _, _ = _load_params_and_config(args.checkpoint)
    dataset = trainer.build_dataset(cfg)
    report = trainer.evaluate(
        params,
        dataset,
        args.split,
        num_tasks=args.tasks,
        num_ways=cfg.episode.num_ways,
        num_shots=cfg.episode.num_shots,
        num_queries=cfg.episode.num_queries,
        mc_samples=cfg.objective.mc_samples,
        seed=args.seed,
    )
    payload = report.to_dict()
    payload.update({"split": args.split, "seed": args.seed, "checkpoint": args.checkpoint})
    _emit(payload)
    return 0


def _cmd_dump_latents(args) -> int:
    params, cfg, _, _ = _load_params_and_config(args.checkpoint)
    dataset = trainer.build_dataset(cfg)
    report = trainer.collapse_diagnostics(
        params,
        dataset,
        args.split,
        num_tasks=args.tasks,
        mc_samples=cfg.objective.mc_samples,
        seed=args.seed,
        num_shots=cfg.episode.num_shots,
        latents_path=args.out,
    )
    figure_path = None
    if not args.no_figures:
        figure_path = os.path.splitext(args.out)[0] + ".png"
        with open(args.out) as fh:
            reader = csv.reader(fh)
            next(reader)
            rows = [[int(r[0]), int(r[1]), int(r[2]), *map(float, r[3:])] for r in reader]
        plots.render_latents_figure(rows, figure_path)
    payload = report.to_dict()
    payload.update({"figure": figure_path, "tasks": args.tasks, "split": args.split})
    _emit(payload)
    return 0


def _schedule_from_config_file(path: str) -> ScheduleConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if isinstance(raw, dict) and "kind" in raw and "schedule" not in raw:
        try:
            return ScheduleConfig(**raw)
        except TypeError as e:
            raise ConfigError(f"schedule object: {e}") from e
    return TrainConfig.from_dict(raw).schedule


def _cmd_preview_schedule(args) -> int:
    sched = _schedule_from_config_file(args.config)
    steps = list(range(sched.total_steps))
    betas = [beta_at(s, sched) for s in steps]
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "beta"])
        for s, b in zip(steps, betas):
            writer.writerow([s, repr(b)])
    figure_path = None
    if not args.no_figures:
        figure_path = os.path.splitext(args.out)[0] + ".png"
        plots.render_schedule_figure(steps, betas, figure_path, title=f"{sched.kind} schedule")
    _emit({"out": args.out, "figure": figure_path, "steps": sched.total_steps})
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = load_train_config(args.config)
    error = run_gradcheck_fixture(cfg)
    passed = error < args.tolerance
    _emit(
        {
            "max_rel_error": error,
            "tolerance": args.tolerance,
            "objective_mode": cfg.objective.mode,
            "passed": passed,
        }
    )
    if not passed:
        _log(f"gradient check failed: {error:.3e} >= {args.tolerance:.3e}")
    return 0 if passed else 2


def run_gradcheck_fixture(cfg: TrainConfig, seed: int = 0) -> float:
    """Finite-difference check of the configured objective on a tiny fixture.

    The fixture shrinks every size (2-way 1-shot, 3-dim features, narrow
    encoder, 2 weight draws) but keeps the config's objective mode, decoder,
    aggregation, and pooling choices, so the check stays fast while
    exercising the configured loss composition. A median bandwidth is pinned
    to 1.0 here: the heuristic is treated as a constant during
    differentiation, so it must not move with the perturbed parameters.
    """
    rng = np.random.default_rng(seed)
    input_dim, feature_dim, ways = 3, 3, 2
    data = rng.normal(0.0, 1.0, size=(ways + 1, 4, input_dim))
    dataset = Dataset(data=data, splits=["meta-train"] * (ways + 1))
    episode = sample_episode(dataset, "meta-train", ways, 1, 2, rng)

    from .model import init_model

    params = init_model(
        rng,
        input_dim=input_dim,
        feature_dim=feature_dim,
        num_ways=ways,
        encoder_widths=(4,),
        activation=cfg.model.activation,
        aggregation=cfg.model.aggregation,
        pooling=cfg.model.pooling,
        decoder=cfg.model.decoder,
        decoder_widths=(4,),
    )
    kernel = KernelConfig(bandwidth=1.0 if cfg.objective.bandwidth == "median" else cfg.objective.bandwidth)
    mode = cfg.objective.mode
    beta = 0.5 if mode != "none" else 0.0

    def f(_):
        return total_loss(
            [episode],
            params,
            beta=beta,
            mode=mode,
            mc_samples=2,
            mmd_samples=8,
            kernel=kernel,
            rng=np.random.default_rng(seed + 1),
        ).node

    return finite_diff_check(f, params.parameters())


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "dump-latents": _cmd_dump_latents,
    "preview-schedule": _cmd_preview_schedule,
    "gradcheck": _cmd_gradcheck,
}


def run(argv) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        _log(f"error: {e}")
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        _log("error: a subcommand is required")
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        _log(f"error: {e}")
        return 1
    except ConfigError as e:
        _log(f"config error: {e}")
        return 1
    except (FewbayesError, RuntimeError, OSError) as e:
        _log(f"runtime error: {e}")
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
