"""Command-line entry point: ``gridrl <command> [--config F] [--set k=v]... [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from gridrl import harness
from gridrl.checks import run_suite
from gridrl.power_flow import PowerFlowError

COMMANDS = ("train", "eval", "fault-test", "sweep-weights", "case-info", "grad-check")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridrl", description="Grid dispatch experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML or JSON config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path), repeatable")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", help="artifact directory")
    return parser


def run_grad_check(cfg: dict, out: Path | None) -> tuple[dict, bool]:
    gc = cfg["grad_check"]
    worst = run_suite(range(int(gc["seeds"])), h=float(gc["h"]))
    ok = all(v < gc["tol"] for v in worst.values())
    if out is not None:
        harness.write_common(out, cfg)
        harness.atomic_write(out / "grad_check.csv",
                             harness.csv_text(["check", "max_rel_err", "passed"],
                                              [[k, v, v < gc["tol"]] for k, v in worst.items()]))
    return worst, ok


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def dispatch(args: argparse.Namespace) -> int:
    cfg = harness.build_config(args.config, args.overrides, args.seed)
    out = Path(args.out) if args.out else None
    cmd = args.command
    if cmd == "case-info":
        totals = harness.case_info(cfg)
        if out is not None:
            harness.write_common(out, cfg)
            harness.write_metrics(out, totals)
        _emit(totals)
    elif cmd == "train":
        _, summary = harness.run_train(cfg, out)
        _emit({k: v for k, v in summary.items() if k != "window_means"})
    elif cmd == "eval":
        _emit(harness.run_eval(cfg, out))
    elif cmd == "fault-test":
        metrics = harness.run_fault_test(cfg, out)
        metrics.pop("rows")
        _emit(metrics)
    elif cmd == "sweep-weights":
        _emit(harness.run_sweep(cfg, out))
    elif cmd == "grad-check":
        worst, ok = run_grad_check(cfg, out)
        for name, err in worst.items():
            print(f"{name}: max_rel_err={err:.3e} {'ok' if err < cfg['grad_check']['tol'] else 'FAIL'}")
        if not ok:
            print("error: numerical: gradient check above tolerance", file=sys.stderr)
            return 3
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except harness.ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (harness.NumericalError, PowerFlowError, FloatingPointError) as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
