"""``irm`` command line: thin argument parsing over ``irm.experiments``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from irm import experiments as X

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

VERBS = ("pretrain", "select", "sweep", "correlate", "sequence", "ablate-metric", "ablate-distributions")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="JSON run config (defaults if omitted)")
    parser.add_argument("--seed", metavar="N", type=int, default=default, help="run only this seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--method", metavar="NAME[,NAME...]", default=default, help="methods to run")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _waypoints(text: str):
    try:
        return [tuple(float(v) for v in pair.split(",")) for pair in text.split(";") if pair.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"waypoints look like 'x,y;x,y': {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irm", description="Skill selection by intrinsic reward matching.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    helps = {
        "pretrain": "train discriminators and save checkpoints plus rollout buffers",
        "select": "run selection methods and write reports and a method x seed table",
        "sweep": "EPIC-loss landscapes over a 2-D skill grid",
        "correlate": "EPIC loss vs zero-shot return for uniform skills",
        "sequence": "sequential selection on a waypoint task",
        "ablate-metric": "EPIC vs L1/L2 (with and without learned scale)",
        "ablate-distributions": "Pearson x canonical sampling distribution grid",
    }
    verbs = {}
    for verb in VERBS:
        verbs[verb] = p = sub.add_parser(verb, help=helps[verb])
        _global_flags(p, suppress=True)
    verbs["sweep"].add_argument("--resolution", type=int, default=None)
    verbs["correlate"].add_argument("--n-skills", type=int, default=None)
    verbs["sequence"].add_argument("--waypoints", type=_waypoints, default=None, help="x,y pairs separated by ';', e.g. --waypoints='-64,64;64,64' (use '=' when the first value is negative)")
    return parser


def resolve_config(args) -> X.RunConfig:
    cfg = X.load_config(args.config) if args.config else X.RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise X.ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    X.validate(cfg)
    return cfg


def _methods(args):
    if args.method is None:
        return None
    methods = tuple(m.strip() for m in args.method.split(",") if m.strip())
    if not methods:
        raise X.ConfigError("--method needs at least one name")
    return methods


def _single(methods, verb):
    if methods is None:
        return None
    if len(methods) != 1:
        raise X.ConfigError(f"{verb} takes a single --method")
    return methods[0]


def run(args) -> None:
    cfg = resolve_config(args)
    methods = _methods(args)
    verb = args.verb
    if verb == "pretrain":
        for r in X.cmd_pretrain(cfg):
            print(f"seed {r['seed']}: final loss {r['final_loss']:.4f}")
    elif verb == "select":
        if methods is not None:
            bad = [m for m in methods if m not in X.METHODS]
            if bad:
                raise X.ConfigError(f"unknown method(s) {bad}; expected a subset of {X.METHODS}")
        result = X.cmd_select(cfg, methods)
        for row in result["table"]:
            print(f"{row['method']:<16} mean return {row['mean']:.4f} +/- {row['se']:.4f}")
    elif verb == "sweep":
        for r in X.cmd_sweep(cfg, args.resolution):
            print(f"seed {r['seed']} {r['reward']}: min loss {r['min_loss']:.4f} "
                  f"at z=({r['argmin_z0']:.3f}, {r['argmin_z1']:.3f}), iqr {r['iqr']:.4f}")
    elif verb == "correlate":
        X.cmd_correlate(cfg, args.n_skills)
    elif verb == "sequence":
        result = X.cmd_sequence(cfg, args.waypoints, methods)
        for row in result["table"]:
            print(f"{row['method']:<24} mean total return {row['mean']:.4f} +/- {row['se']:.4f}")
    elif verb == "ablate-metric":
        result = X.cmd_ablate_metric(cfg, _single(methods, verb))
        for row in result["table"]:
            print(f"{row['metric']:<10} mean return {row['mean']:.4f} +/- {row['se']:.4f}")
    elif verb == "ablate-distributions":
        result = X.cmd_ablate_distributions(cfg, _single(methods, verb))
        for row in result["table"]:
            print(f"{row['row']:<52} mean return {row['mean']:.4f} +/- {row['se']:.4f}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which is also our config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run(args)
    except X.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
