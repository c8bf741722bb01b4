"""Command-line entry point: ``pregrasp {train,eval,sweep,trace,grad-check}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .environment import PreGraspEnv
from .harness import (
    CheckpointError,
    MetricsWriter,
    RunConfig,
    RunConfigError,
    checkpoint_meta,
    load_checkpoint,
    load_run_config,
    record_trace,
    resume_state,
    save_checkpoint,
    write_trace,
)
from .neuralnet import ShapeError
from .sac import TrainingDivergedError, evaluate, train, velocity_sweep

log = logging.getLogger("pregrasp")

GRAD_CHECK_TOLERANCE = 1e-5
BEST_NAME = "best.ckpt.json"
PROGRESS_NAME = "progress.ckpt.json"
FINAL_NAME = "final.ckpt.json"


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _caps(text: str) -> List[float]:
    try:
        caps = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--caps: not a comma-separated list of numbers: {text!r}")
    if not caps or any(c < 0 for c in caps):
        raise argparse.ArgumentTypeError("--caps: need at least one non-negative value")
    return caps


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pregrasp", description="Pre-grasp SAC training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy from a run config")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out", help="output directory (overrides output.directory)")
    t.add_argument("--resume", action="store_true",
                   help=f"continue from <out>/{PROGRESS_NAME}")

    def add_eval_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--episodes", type=_positive_int, default=100)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--episode-length", type=_positive_int,
                        help="override the evaluation episode length")
        sp.add_argument("--json", action="store_true", help="print machine-readable output")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    add_eval_flags(e)
    e.add_argument("--velocity-cap", type=float, help="maximum relative velocity in m/s")

    s = sub.add_parser("sweep", help="evaluate a checkpoint at several velocity caps")
    add_eval_flags(s)
    s.add_argument("--caps", type=_caps, default=[0.4, 0.3, 0.2, 0.1])

    tr = sub.add_parser("trace", help="record one noise-free episode as JSON")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", help="trace file (default: stdout)")
    tr.add_argument("--velocity-cap", type=float)
    tr.add_argument("--episode-length", type=_positive_int)

    g = sub.add_parser("grad-check", help="finite-difference check of every analytic gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-entries", type=_positive_int, default=400,
                   help="entries probed per parameter array (random subset)")
    g.add_argument("--full", action="store_true", help="probe every entry (slow)")
    return p


# ------------------------------------------------------------------ #
def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    if args.out:
        cfg = dataclasses.replace(cfg, output_dir=str(out))
    resume = None
    if args.resume:
        progress = out / PROGRESS_NAME
        if not progress.exists():
            raise CliError(f"--resume: no progress checkpoint at {progress}")
        resume = resume_state(progress, cfg)
        if resume.episode >= cfg.trainer.episodes:
            raise CliError(f"trainer.episodes: run already finished {resume.episode} episodes; "
                           "raise trainer.episodes to continue")
        _truncate_metrics(out / "metrics.csv", resume.episode)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    writer = MetricsWriter(out / "metrics.csv", append=resume is not None)
    dims = (PreGraspEnv.observation_dim, PreGraspEnv.action_dim)

    def on_best(state, report):
        save_checkpoint(state.bundle, checkpoint_meta(cfg, state, "best", dims,
                                                      {"eval": report.as_row()}), out / BEST_NAME)

    def on_progress(state):
        save_checkpoint(state.bundle, checkpoint_meta(cfg, state, "progress", dims), out / PROGRESS_NAME)

    report = train(cfg.env, cfg.trainer, on_episode=writer, on_best=on_best, on_progress=on_progress,
                   resume=resume, deterministic=cfg.deterministic)
    save_checkpoint(report.bundle, checkpoint_meta(cfg, report.state, "final", dims), out / FINAL_NAME)
    if report.best_eval is not None:
        print(f"best eval: success {report.best_eval.success_rate:.2f}, "
              f"mean reward {report.best_eval.mean_reward:.2f}")
    print(f"finished {report.state.episode} episodes; outputs in {out}")
    return 0


def _truncate_metrics(path: Path, episodes: int) -> None:
    """Drop rows past the resume point so the CSV has one row per episode."""
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) < episodes]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def _load_policy(path):
    bundle, meta = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["run_config"])
    return bundle.actor, cfg


def _eval_env(cfg: RunConfig, episode_length: Optional[int]):
    length = episode_length or cfg.trainer.eval_episode_length
    env = cfg.env
    if length is not None:
        env = dataclasses.replace(env, episode_length=length)
    return env


def _cmd_eval(args) -> int:
    actor, cfg = _load_policy(args.checkpoint)
    report = evaluate(actor, _eval_env(cfg, args.episode_length), args.episodes,
                      args.velocity_cap, seed=args.seed)
    if args.json:
        print(json.dumps(report.as_row()))
    else:
        print(f"episodes            {report.episodes}")
        print(f"velocity cap (m/s)  {report.velocity_cap:.2f}")
        print(f"mean reward         {report.mean_reward:.2f}")
        print(f"reward std          {report.reward_std:.2f}")
        print(f"success rate        {report.success_rate:.2f}")
    return 0


def _cmd_sweep(args) -> int:
    actor, cfg = _load_policy(args.checkpoint)
    reports = velocity_sweep(actor, _eval_env(cfg, args.episode_length), args.caps, args.episodes,
                             seed=args.seed)
    if args.json:
        print(json.dumps([r.as_row() for r in reports]))
        return 0
    print(f"{'Maximum Relative Velocity':>26} | {'Mean Eval Reward':>16} | "
          f"{'Mean Reward Standard Deviation':>30} | {'Mean Eval Success Rate':>22}")
    for r in reports:
        print(f"{f'{r.velocity_cap:.1f} m/s':>26} | {r.mean_reward:16.2f} | "
              f"{r.reward_std:30.2f} | {r.success_rate:22.2f}")
    return 0


def _cmd_trace(args) -> int:
    actor, cfg = _load_policy(args.checkpoint)
    env = _eval_env(cfg, args.episode_length)
    if args.velocity_cap is not None:
        env = dataclasses.replace(env, max_relative_speed=args.velocity_cap)
    trace = record_trace(actor, env, args.seed)
    if args.out:
        write_trace(trace, args.out)
        print(f"wrote {len(trace)} steps to {args.out}")
    else:
        json.dump(trace, sys.stdout)
        print()
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import run_grad_check

    results = run_grad_check(seed=args.seed, max_entries=None if args.full else args.max_entries)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.name:28s} max rel error {r.max_rel_error:.3e}  ({r.compared} entries, "
              f"{r.skipped} skipped at kinks)")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < GRAD_CHECK_TOLERANCE else 1


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep, "trace": _cmd_trace,
            "grad-check": _cmd_grad_check}


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"pregrasp: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (CliError, RunConfigError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"pregrasp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"pregrasp train: diverged: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_main())
