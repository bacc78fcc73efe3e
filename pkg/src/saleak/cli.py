"""Command line entry point: ``run``, ``sweep`` and ``verify``."""
from __future__ import annotations

import argparse
import sys

from .errors import SaleakError
from .experiment import SWEEP_AXES, load_config, run_experiment, run_sweep


def _parse_values(text: str) -> list:
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        num = float(item)
        out.append(int(num) if num.is_integer() and "." not in item and "e" not in item.lower() else num)
    return out


def _summary(report) -> str:
    ok = sum(r["status"] == "ok" for r in report.rows)
    mean = report.mean("lnacc_all")
    tail = f", mean lnacc_all {mean:.4f}" if mean is not None else ""
    return f"{ok}/{len(report.rows)} trials ok{tail}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saleak", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="CSV path; a .json sidecar is written next to it")

    sweep = sub.add_parser("sweep", help="run one experiment per axis value")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument("--values", required=True, help="comma separated, e.g. 16,64,256")
    sweep.add_argument("--out")

    verify = sub.add_parser("verify", help="run the acceptance checks and print pass/fail lines")
    verify.add_argument("--quick", action="store_true", help="fewer trials and a smaller grid")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = run_experiment(load_config(args.config), out=args.out)
            print(_summary(report))
        elif args.command == "sweep":
            report = run_sweep(load_config(args.config), args.axis, _parse_values(args.values), out=args.out)
            for value in dict.fromkeys(r[args.axis] for r in report.rows):
                mean = report.mean("lnacc_all", **{args.axis: value})
                print(f"{args.axis}={value}: mean lnacc_all {'n/a' if mean is None else f'{mean:.4f}'}")
        else:
            from .acceptance import run_all

            results = run_all(quick=args.quick, echo=True)
            return 0 if all(r.passed is not False for r in results) else 1
    except SaleakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
