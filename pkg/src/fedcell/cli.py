"""Command-line entry point: ``fedcell <command> <config.toml>``."""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import OUTPUT_ENV, load_config
from .errors import FedcellError


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fedcell",
        description="Federated learning over an unreliable cellular uplink.",
        epilog=f"Output files go to the config's output_dir unless ${OUTPUT_ENV} is set.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "train with the configured aggregation rule"),
        ("compare", "train every aggregation rule on shared random draws"),
        ("diag-success", "analytic vs Monte-Carlo success probability per device"),
        ("schedule", "optimal resource-block allocation and objective values"),
        ("bound", "convergence-bound curve with estimated constants"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config", help="TOML experiment file")
        if name == "diag-success":
            sp.add_argument("--draws", type=int, default=None, help="Monte-Carlo draws per device")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            for path in harness.run_experiment(cfg):
                print(path)
        elif args.command == "compare":
            path, results = harness.compare_rules(cfg)
            print(path)
            for r in results:
                print(f"{r.rule}: initial {r.initial_loss:.4f}, final {sum(r.final_losses) / len(r.final_losses):.4f}")
        elif args.command == "diag-success":
            print(harness.diag_success(cfg, args.draws))
        elif args.command == "schedule":
            rep = harness.schedule(cfg)
            print(rep.path)
            print(rep.summary_path)
            print(f"objective uniform {rep.objective_uniform:.4f}, optimal {rep.objective_optimal:.4f}")
        elif args.command == "bound":
            for path in harness.bound_curve(cfg):
                print(path)
    except FedcellError as exc:
        print(f"fedcell: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fedcell: I/O error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
