"""Command-line entry point (``pathcal`` or ``python -m pathcal``)."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .errors import MissingArtifactError

STAGE_COMMANDS = ("train-backbone", "reconfigure", "distill", "eval", "ood", "report")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the flags with suppressed defaults so that values given
    # before the subcommand are not overwritten
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=d(None), help="flat key = value config file")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--out", type=Path, default=d(Path("runs/default")), help="run directory")
    p.add_argument("--resume", action="store_true", default=d(False),
                   help="skip stages whose outputs exist")
    return p


def build_parser() -> argparse.ArgumentParser:
    flags = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="pathcal", parents=[_global_flags(suppress=False)],
                                     description="Distill a transformer's probability path "
                                                 "into a transition kernel and evaluate calibration.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sp = sub.add_parser(name, parents=[flags], help=f"run the {name} stage")
        if name == "eval":
            sp.add_argument("--dump", type=Path, help="directory for prediction CSVs")
    sp = sub.add_parser("run", parents=[flags], help="run every stage in order")
    sp.add_argument("--no-ood", action="store_true")
    sp = sub.add_parser("gen-data", parents=[flags], help="write a synthetic dataset as CSV")
    sp.add_argument("--kind", default="blobs")
    sp.add_argument("-n", type=int, default=600)
    sp.add_argument("--layout", choices=("grid", "tabular"), default=None)
    sp.add_argument("--output", type=Path, help="CSV path (default OUT/data.csv)")
    sp = sub.add_parser("verify", parents=[flags], help="run the oracle check suite")
    sp.add_argument("--quick", action="store_true", help="fewer random instances")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (OSError, ValueError) as exc:
        print(f"pathcal: bad config: {exc}", file=sys.stderr)
        return 2

    if args.command == "verify":
        from .verify import run_checks
        return 0 if run_checks(quick=args.quick, seed=cfg.seed) else 1

    if args.command == "gen-data":
        from .data import gen_data, save_csv
        try:
            ds = gen_data(args.kind, args.n, cfg.seed, layout=args.layout)
        except ValueError as exc:
            print(f"pathcal gen-data: {exc}", file=sys.stderr)
            return 2
        dest = args.output or args.out / "data.csv"
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_csv(ds, dest)
        print(f"wrote {len(ds)} records ({ds.kind}, {ds.layout}) to {dest}")
        return 0

    from .pipeline import STAGES, Run, StageError, run_stage

    run = Run(cfg, args.out)
    run.init()
    stages = STAGES if args.command == "run" else (args.command,)
    if args.command == "run" and args.no_ood:
        stages = tuple(s for s in STAGES if s != "ood")
    try:
        for stage in stages:
            kwargs = {"dump": args.dump} if stage == "eval" and getattr(args, "dump", None) else {}
            ran = run_stage(run, stage, resume=args.resume, **kwargs)
            print(f"{stage}: {'done' if ran else 'skipped (resume)'} -> {args.out}")
    except MissingArtifactError as exc:
        print(f"pathcal {args.command}: missing artifact: {exc}", file=sys.stderr)
        return 3
    except StageError as exc:
        print(f"pathcal: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
