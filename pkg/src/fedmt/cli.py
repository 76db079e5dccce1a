"""Command-line entry point: ``fedmt run | sweep | ntk-check``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigInvalid, FedMTError
from .harness import SWEEP_AXES, load_config, parse_config, run_experiment, run_ntk_check, run_sweep

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmt", description="Mixed-type-label federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, help="override the root seed")
    run.add_argument("--out", help="output directory (overrides config and FEDMT_OUTPUT_DIR)")

    sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--out")

    ntk = sub.add_parser("ntk-check", help="Gram-matrix eigenvalue checks")
    ntk.add_argument("--config", required=True)
    ntk.add_argument("--out")
    return p


def _raw(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid([("config", str(exc))]) from exc


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            if args.seed is not None:
                doc = _raw(args.config)
                doc["seed"] = args.seed
                config = parse_config(doc)
            else:
                config = load_config(args.config)
            store = run_experiment(config, args.out)
            print(json.dumps({"run_id": store.run_id, **store.summary()}))
            return EXIT_OK
        if args.command == "sweep":
            doc = _raw(args.config)
            load_config(args.config)  # validate the base config up front
            values = [v for v in (s.strip() for s in args.values.split(",")) if v]
            results = run_sweep(doc, args.axis, values, args.out)
            for store in results:
                line = {"run_id": store.run_id, **store.summary()} if store.ok else {"run_id": store.run_id, "error": store.error}
                print(json.dumps(line))
            return EXIT_OK if all(s.ok for s in results) else EXIT_RUNTIME
        config = load_config(args.config)
        report = run_ntk_check(config, args.out)
        for check in report["bound_checks"]:
            print(f"{'PASS' if check['pass'] else 'FAIL'} {check['name']}: {check['lhs']:.6g} <= {check['rhs']:.6g}")
        return EXIT_OK if all(c["pass"] for c in report["bound_checks"]) else EXIT_RUNTIME
    except ConfigInvalid as exc:
        for fld, why in exc.problems:
            print(f"config error: {fld}: {why}", file=sys.stderr)
        return EXIT_CONFIG
    except FedMTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
