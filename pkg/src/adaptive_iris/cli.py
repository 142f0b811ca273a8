"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 missing prerequisite (stage, checkpoint or dataset).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .evaluation import POLICIES
from .experiment import (
    OUTPUT_ROOT_ENV,
    STAGE_ORDER,
    ConfigError,
    Experiment,
    ExperimentConfig,
    run_derive_labels,
    run_plot,
    run_stage,
    run_sweep,
)
from .model import PrerequisiteError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_PREREQ = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--preset", choices=("desk", "paper-shape"), help="base preset (default desk)")
    common.add_argument("--seed", type=int, help="global seed override")
    common.add_argument("--out", type=Path, help=f"experiment directory (else config out_dir, re-rooted by ${OUTPUT_ROOT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adaptive-iris", description="Resolution-adaptive iris feature extraction experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="write resolved config and generate/validate the dataset")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=list(STAGE_ORDER))
    sub.add_parser("derive-labels", parents=[common], help="best expert per degradation cell")
    s = sub.add_parser("sweep", parents=[common], help="evaluate routing policies over the degradation grid")
    s.add_argument("--policies", nargs="+", choices=POLICIES, help="subset of policies (default: all)")
    s.add_argument("--no-plots", action="store_true")
    sub.add_parser("plot", parents=[common], help="re-render plots from the latest sweep report")
    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--check", action="append", help="run only the named check (repeatable)")
    return p


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        try:
            raw = yaml.safe_load(args.config.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.config}: malformed YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: config root must be a mapping")
        if args.preset:
            raw.setdefault("preset", args.preset)
        cfg = ExperimentConfig.from_dict(raw, args.seed)
    else:
        cfg = ExperimentConfig.from_preset(args.preset or "desk")
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = args.out
        if args.command == "prepare":
            with Experiment(cfg, out) as exp:
                manifest = exp.prepare()
            print(f"dataset: {manifest}")
        elif args.command == "train":
            for path in run_stage(cfg, args.stage, out):
                print(path)
        elif args.command == "derive-labels":
            print(run_derive_labels(cfg, out))
        elif args.command == "sweep":
            for path in run_sweep(cfg, args.policies, out, plots=not args.no_plots):
                print(path)
        elif args.command == "plot":
            for path in run_plot(cfg, out):
                print(path)
        elif args.command == "verify":
            from .verification import CHECKS, run_checks

            unknown = [c for c in args.check or () if c not in CHECKS]
            if unknown:
                raise ConfigError(f"unknown checks {unknown}; available: {list(CHECKS)}")
            results = run_checks(args.check, echo=print)
            failed = [r.name for r in results if not r.passed]
            print(f"{len(results) - len(failed)}/{len(results)} checks passed")
            return EXIT_RUNTIME if failed else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
