#!/usr/bin/env python3
"""
rfmp command line

Commands (each takes ``--config <path>`` plus dotted overrides such as
``--train.epochs 50`` or the aliases ``--t-end``, ``--nfe``, ``--seed``,
``--epochs``, ``--n-trials``):

    rfmp gen-data         write a task dataset
    rfmp train            train a model, write checkpoint and loss CSV
    rfmp sample           integrate a model on dataset observations
    rfmp rollout          closed-loop reach rollouts
    rfmp eval-properties  run the property suite

Exit codes: 0 ok, 1 property failure, 2 configuration error, 3 I/O error,
4 numeric divergence.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config, parse_overrides
from .distributions import make_rng, sample_chunk_prior
from .errors import ConfigError, DivergenceError, FileFormatError, ManifoldError, ProtocolError
from .inference import (
    Policy,
    horizon_config,
    run_rollouts,
    write_summary_json,
    write_trajectory_csv,
)
from .nnet import Checkpoint, load_checkpoint, save_checkpoint
from .properties import MUTATIONS, run_properties
from .tasks import ReachEnv, generate_task_dataset, nearest_distance, read_dataset, write_dataset
from .training import Dataset, make_training_pair, train, training_windows, write_history_csv

logger = logging.getLogger(__name__)


# ============================================================================
# Exit Codes
# ============================================================================

EXIT_OK = 0
EXIT_PROPERTY_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _status(tag: str, message: str) -> None:
    print(f"[{tag}] {message}", file=sys.stderr)


def _output(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.paths.output_dir) / name


def _prepare(*paths: Path | str) -> None:
    for path in paths:
        Path(path).parent.mkdir(parents=True, exist_ok=True)


def _load_dataset(cfg: RunConfig) -> Dataset:
    dataset = read_dataset(cfg.paths.dataset)
    spec = cfg.manifold_spec()
    if dataset.manifold != spec:
        raise ConfigError(
            "manifold", f"dataset {cfg.paths.dataset} is on {dataset.manifold}, config says {spec}"
        )
    return dataset


def _load_policy(cfg: RunConfig, integrator=None) -> tuple[Checkpoint, Policy]:
    checkpoint = load_checkpoint(cfg.paths.checkpoint)
    if checkpoint.manifold != cfg.manifold_spec():
        raise ConfigError(
            "manifold", f"checkpoint is on {checkpoint.manifold}, config says {cfg.manifold}"
        )
    trained = checkpoint.metadata.get("policy", {})
    for name in ("T_p", "T_o"):
        if name in trained and trained[name] != getattr(cfg.policy, name):
            raise ConfigError(
                f"policy.{name}",
                f"checkpoint was trained with {name}={trained[name]}, "
                f"config says {getattr(cfg.policy, name)}",
            )
    policy =Policy.from_checkpoint(
        checkpoint, cfg.policy, integrator or cfg.integrator, cfg.prior_spec()
    )
    if policy.mode != cfg.mode:
        _status("WARNING", f"checkpoint was trained in {policy.mode} mode, config says {cfg.mode}")
    return checkpoint, policy


# ============================================================================
# Commands
# ============================================================================

def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = generate_task_dataset(cfg.task, cfg.seed)
    _prepare(cfg.paths.dataset)
    write_dataset(cfg.paths.dataset, dataset)
    _status("OK", f"Wrote {len(dataset.demos)} demonstrations on {dataset.manifold} "
                  f"to {cfg.paths.dataset}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _load_dataset(cfg)
    dataset.validate(cfg.policy.T_p, cfg.policy.T_o)
    history_path = _output(cfg, "loss.csv")
    _prepare(cfg.paths.checkpoint, history_path)

    result = train(dataset, cfg.train_config(), cfg.flow_params(), cfg.policy, cfg.model,
                   cfg.prior_spec())
    checkpoint = Checkpoint(
        model=result.model,
        manifold=dataset.manifold,
        flow=cfg.flow_params(),
        groups={
            "ema": result.ema_model.params,
            "adam_m": result.adam.m,
            "adam_v": result.adam.v,
            "normalizer": result.normalizer.to_arrays(),
        },
        metadata={
            "seed": cfg.seed,
            "epochs": cfg.train.epochs,
            "best_epoch": result.best_epoch,
            "adam_step": result.adam.step,
            "policy": asdict(cfg.policy),
            "task": asdict(cfg.task),
            "version": __version__,
        },
    )
    save_checkpoint(cfg.paths.checkpoint, checkpoint)
    reloaded = load_checkpoint(cfg.paths.checkpoint)
    params = result.model.params
    if any(reloaded.model.params[k].tobytes() != v.tobytes() for k, v in params.items()):
        raise FileFormatError(f"checkpoint {cfg.paths.checkpoint} did not reload bit-exactly")
    write_history_csv(history_path, result.history)

    if result.history:
        first, last = result.history[0][1], result.history[-1][1]
        _status("INFO", f"loss {first:.5f} -> {last:.5f} over {len(result.history)} epochs")
    _status("OK", f"Checkpoint written to {cfg.paths.checkpoint}")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _load_dataset(cfg)
    checkpoint, policy = _load_policy(cfg)
    samples_path = _output(cfg, "samples.csv")
    summary_path = _output(cfg, "samples_summary.json")
    _prepare(samples_path, summary_path)

    rng = make_rng(cfg.seed)
    normalized = policy.normalizer.apply(dataset)
    windows = training_windows(normalized, cfg.policy)
    picks = rng.integers(0, len(windows), size=cfg.sample.n_samples)
    observations = np.stack([
        make_training_pair(normalized.demos[windows[k][0]], windows[k][1], cfg.policy.T_p,
                           cfg.policy.T_o, rng)[1]
        for k in picks
    ])
    x0 = sample_chunk_prior(policy.prior, cfg.policy.T_p, n=len(picks), rng=rng)
    data_points = np.concatenate([d.actions for d in dataset.demos])

    finals, horizons = [], []
    for t_end in cfg.sample.horizons:
        integrator = horizon_config(cfg.integrator, policy.flow, t_end, policy.mode)
        chunks, _ = replace(policy, integrator=integrator).sample_chunks(observations, rng, x0=x0)
        nearest = nearest_distance(dataset.manifold, chunks, data_points)
        finals.append(chunks)
        horizons.append({
            "t_end": t_end,
            "nfe": integrator.nfe,
            "mean_nearest_distance": float(np.mean(nearest)),
            "max_nearest_distance": float(np.max(nearest)),
        })
        _status("INFO", f"T={t_end}: mean distance to data {np.mean(nearest):.4f}")
    for entry, chunks in zip(horizons, finals):
        entry["mean_displacement"] = float(np.mean(dataset.manifold.distance(chunks, finals[0])))

    with open(samples_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        width = dataset.manifold.ambient_dim
        writer.writerow(["t_end", "sample", "step", *[f"c{i}" for i in range(width)]])
        for t_end, chunks in zip(cfg.sample.horizons, finals):
            for sample, chunk in enumerate(chunks):
                for step, point in enumerate(chunk):
                    coords = [repr(float(c)) for c in point]
                    writer.writerow([repr(float(t_end)), sample, step, *coords])
    write_summary_json(
        summary_path,
        {"mode": policy.mode, "n_samples": cfg.sample.n_samples, "horizons": horizons},
        metadata={"checkpoint": str(cfg.paths.checkpoint), "dataset": str(cfg.paths.dataset)},
    )
    _status("OK", f"Samples written to {samples_path}")
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.task.name != "reach":
        raise ConfigError("task.name", "rollout runs the reach task")
    _, policy = _load_policy(cfg)
    trajectory_path = _output(cfg, "trajectories.csv")
    summary_path = _output(cfg, "rollout_summary.json")
    _prepare(trajectory_path, summary_path)

    rollout = cfg.rollout

    def make_env(seed: int) -> ReachEnv:
        return ReachEnv.random(seed, sphere=cfg.task.sphere, max_steps=rollout.max_steps,
                               tolerance=rollout.tolerance)

    report = run_rollouts(policy, make_env, rollout.n_trials, cfg.seed,
                          success_score=rollout.success_score)
    write_trajectory_csv(trajectory_path, report.trajectory_rows)
    write_summary_json(summary_path, report.summary, report.records,
                       {"checkpoint": str(cfg.paths.checkpoint), "seed": cfg.seed})
    summary = report.summary
    _status("OK", f"{rollout.n_trials} rollouts: success {summary['success']:.2f}, "
                  f"score {summary['score']:.3f}, nfe {summary['nfe']}")
    return EXIT_OK


def cmd_eval_properties(cfg: RunConfig, args: argparse.Namespace) -> int:
    report = run_properties(cfg.seed, mutation_name=args.mutation)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        _prepare(args.report)
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    for record in report["properties"]:
        if not record["passed"]:
            _status("ERROR", f"{record['name']}: {record['detail']}")
    if report["failed"]:
        _status("ERROR", f"{report['failed']} of {len(report['properties'])} properties failed")
        return EXIT_PROPERTY_FAILURE
    _status("OK", f"All {report['passed']} properties passed")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "Generate a task dataset"),
    "train": (cmd_train, "Train a vector-field model"),
    "sample": (cmd_sample, "Sample action chunks at one or more integration horizons"),
    "rollout": (cmd_rollout, "Closed-loop rollouts on the reach task"),
    "eval-properties": (cmd_eval_properties, "Run the property suite"),
}


# ============================================================================
# Entry Point
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfmp",
        description="Riemannian flow matching policies on synthetic tasks",
        epilog="Any --section.key VALUE pair overrides the config file.",
    )
    parser.add_argument("--version", action="version", version=f"rfmp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        cmd.add_argument("--verbose", action="store_true", help="Debug logging")
        cmd.add_argument("--quiet", action="store_true", help="Warnings and errors only")
        if name == "eval-properties":
            cmd.add_argument("--mutation", choices=MUTATIONS,
                             help="Install a known-bad implementation before running")
            cmd.add_argument("--report", help="Write the JSON report here instead of stdout")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    _configure_logging(args)
    handler = COMMANDS[args.command][0]
    try:
        cfg = load_run_config(args.config, parse_overrides(extra))
        return handler(cfg, args)
    except (ConfigError, ManifoldError) as exc:
        _status("ERROR", f"Invalid configuration: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        _status("ERROR", f"Numeric divergence: {exc}")
        return EXIT_DIVERGED
    except ProtocolError as exc:
        _status("ERROR", f"Protocol error: {exc}")
        return EXIT_CONFIG
    except (OSError, FileFormatError) as exc:
        _status("ERROR", f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
