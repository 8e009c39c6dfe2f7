"""Command-line front end for the experiment harness.

Every subcommand builds a :class:`~cfsignal.harness.RunConfig` the same way:
defaults, then an optional JSON config file (``--config`` flag or the
``CFSIGNAL_CONFIG`` environment variable), then explicit flags on top.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CfsignalError
from .harness import (ABLATION_METHODS, ENVS, METHODS, RunConfig,
                      export_case_study, noise_experiment, run_ablation,
                      train, weight_sweep)

CONFIG_ENV_VAR = "CFSIGNAL_CONFIG"


def _load_base_config(path: str | None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        return RunConfig()
    return RunConfig.from_json(Path(path).read_text())


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    over = {}
    for flag, field in (("method", "method"), ("env", "env"),
                        ("epochs", "epochs"), ("max_steps", "max_steps"),
                        ("noise_scale", "noise_scale"), ("out", "out_dir"),
                        ("grid_resolution", "grid_resolution"),
                        ("cf_source", "cf_source"), ("workers", "workers"),
                        ("train_gap", "train_gap"), ("w1", "w1"), ("w2", "w2")):
        val = getattr(args, flag, None)
        if val is not None:
            over[field] = val
    if getattr(args, "seed", None) is not None:
        over["seeds"] = tuple(args.seed)
    return replace(cfg, **over) if over else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (or set $" + CONFIG_ENV_VAR + ")")
    p.add_argument("--env", choices=ENVS)
    p.add_argument("--seed", type=int, nargs="+", metavar="S",
                   help="one or more seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--grid-resolution", dest="grid_resolution", type=int)
    p.add_argument("--train-gap", dest="train_gap", type=int)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--cf-source", dest="cf_source", choices=("scm", "oracle"))
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfsignal",
        description="Counterfactual safe-RL laboratory for traffic signals")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one method")
    p_train.add_argument("--method", choices=METHODS)
    _add_common(p_train)

    p_abl = sub.add_parser("ablation", help="run the ablation arms")
    p_abl.add_argument("--methods", nargs="+", choices=METHODS,
                       default=list(ABLATION_METHODS))
    _add_common(p_abl)

    p_sweep = sub.add_parser("sweep", help="reward-weight trade-off sweep")
    p_sweep.add_argument("--w1-grid", dest="w1_grid", type=float, nargs="+",
                         required=True)
    p_sweep.add_argument("--w2-grid", dest="w2_grid", type=float, nargs="+",
                         required=True)
    _add_common(p_sweep)

    p_noise = sub.add_parser("noise", help="observation-noise robustness")
    p_noise.add_argument("--scales", type=float, nargs="+", required=True)
    _add_common(p_noise)

    p_case = sub.add_parser("case-study", help="export one collision case")
    p_case.add_argument("--run", required=True, help="run directory")
    p_case.add_argument("--collision", required=True, type=int,
                        help="record id from the counterfactual dumps")
    p_case.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "case-study":
            dest = export_case_study(args.run, args.collision, args.out)
            print(f"case written to {dest}")
            return 0
        cfg = _apply_overrides(_load_base_config(args.config), args)
        if args.command == "train":
            result = train(cfg)
            s = result.summary
            print(f"{s['method']}: collisions {s['collisions_mean']:.2f} "
                  f"± {s['collisions_std']:.2f}, delay {s['delay_mean']:.2f} s, "
                  f"throughput {s['throughput_mean']:.1f}")
            print(f"artifacts in {result.out_dir}")
        elif args.command == "ablation":
            rows = run_ablation(cfg, tuple(args.methods), cfg.out_dir)
            for s in rows:
                print(f"{s['method']:>14}: collisions {s['collisions_mean']:.2f}, "
                      f"delay {s['delay_mean']:.2f} s")
        elif args.command == "sweep":
            rows = weight_sweep(cfg, args.w1_grid, args.w2_grid, cfg.out_dir)
            for s in rows:
                star = " *" if s.get("pareto") else ""
                print(f"w=({s['w1']:.2f},{s['w2']:.2f}): collisions "
                      f"{s['collisions_mean']:.2f}, delay {s['delay_mean']:.2f}{star}")
        elif args.command == "noise":
            rows = noise_experiment(cfg, args.scales, cfg.out_dir)
            for s in rows:
                print(f"scale {s['noise_scale']:.2f}: collisions "
                      f"{s['collisions_mean']:.2f}, delay {s['delay_mean']:.2f}")
    except CfsignalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
