"""Command-line entry point.

Subcommands::

    hjbtree offline    --config run.ini [--override offline.max_rank=10 ...]
    hjbtree online     --config run.ini
    hjbtree study      --config run.ini --override study.kind=statistical
    hjbtree verify     --config run.ini
    hjbtree trajectory --config run.ini

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 resource cap exceeded.
"""

import argparse
import logging
import sys

from .config import load_config
from .driver import run_offline, run_online, run_pruning_study, run_verify
from .errors import CapExceeded, ConfigError, NumericalError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hjbtree",
        description="Optimal feedback control of semilinear PDEs by dynamic "
                    "programming on trees with multilinear model reduction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("offline", "coarse full-order phase: snapshot harvest and basis build"),
        ("online", "reduced phase: pruned tree, value function, trajectory"),
        ("study", "pruning parameter sweeps (study.kind selects the sweep)"),
        ("verify", "a-posteriori error-bound verification (desk scale)"),
        ("trajectory", "online phase plus full state exports along the path"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="INI configuration file")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--preset", default=None,
                        help="problem preset (advdiff, allen-cahn, burgers3d, vanderpol)")
        sp.add_argument("--override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    overrides = list(args.override)
    if args.preset:
        overrides.append(f"problem.preset={args.preset}")
    if args.out:
        overrides.append(f"output.dir={args.out}")
    try:
        needs_offline = args.command in ("offline", "verify")
        cfg = load_config(args.config, overrides, require_offline=needs_offline)
        if args.command == "offline":
            result = run_offline(cfg)
            ranks = result.summary["basis_ranks"]
            print(f"offline done: {result.summary['n_nodes']} nodes, "
                  f"basis ranks {ranks}, artifacts in {cfg.out_dir}")
        elif args.command in ("online", "trajectory"):
            result = run_online(cfg)
            print(f"online done: value {result.summary['value']:.6g}, "
                  f"{result.summary['n_nodes']} nodes, "
                  f"trajectory in {cfg.out_dir}/trajectory.csv")
        elif args.command == "study":
            result = run_pruning_study(cfg)
            print(f"study '{result['kind']}' done: {len(result['rows'])} rows "
                  f"in {result['csv']}")
        elif args.command == "verify":
            result = run_verify(cfg)
            state_ok = result["state_bound"]["all_passed"]
            value_ok = result["value_bound"]["passed"]
            print(f"state bound: {'pass' if state_ok else 'FAIL'} "
                  f"({result['state_bound']['paths_passed']}/"
                  f"{result['state_bound']['paths_checked']} paths), "
                  f"value bound: {'pass' if value_ok else 'FAIL'}")
            if not (state_ok and value_ok):
                raise NumericalError("an error bound was violated; see the reports")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CapExceeded as exc:
        print(f"resource cap exceeded: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
