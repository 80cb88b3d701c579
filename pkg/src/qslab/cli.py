"""Command-line driver: calibrate, run, sweep, report.

Exit codes: 0 success, 1 configuration/usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .errors import (CalibrationDivergenceError, ConfigError, DegenerateRowError,
                     MetricUndefinedError, NumericalError, ParameterError, ShapeError)
from .harness import (calibrate_from_config, load_config, run_from_config,
                      spectrum_from_config, sweep, write_spectrum_csv, write_sweep_csv)

_CONFIG_ERRORS = (ConfigError, ParameterError, ShapeError)
_NUMERICAL_ERRORS = (NumericalError, CalibrationDivergenceError, DegenerateRowError,
                     MetricUndefinedError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of calling sys.exit(2)."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="qslab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="calibrate quantizer parameters for one block")
    cal.add_argument("--config", default=None, help="JSON config (defaults used if omitted)")
    cal.add_argument("--out", required=True, help="output JSON path for the calibration result")
    cal.add_argument("--loss-csv", default=None, help="optional per-term loss trace CSV")

    run = sub.add_parser("run", help="run the multi-timestep pipeline and write a report")
    run.add_argument("--config", default=None)
    run.add_argument("--calib", default=None, help="calibration result JSON to load")
    run.add_argument("--out", required=True, help="output report directory")
    run.add_argument("--export-cache", action="store_true",
                     help="also export the final residual cache payload")
    run.add_argument("--spectrum", action="store_true",
                     help="also write the drift-term singular spectrum CSV")

    sw = sub.add_parser("sweep", help="grid sweep over pipeline parameters")
    sw.add_argument("--config", default=None)
    sw.add_argument("--grid", required=True, help="JSON file: {param: [values, ...]}")
    sw.add_argument("--out", required=True, help="output CSV path")
    sw.add_argument("--no-calib", action="store_true",
                    help="skip per-cell calibration (min-max parameters only)")

    rep = sub.add_parser("report", help="summarize a run report directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    result = calibrate_from_config(cfg)
    result.save(args.out)
    loss_csv = args.loss_csv or os.path.splitext(args.out)[0] + ".loss.csv"
    result.write_loss_csv(loss_csv)
    print(f"calibration written to {args.out} (loss trace: {loss_csv})")
    print(f"objective: initial {result.loss_trace[0]:.6e} -> final {result.final_report.total:.6e}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    calib = None
    if args.calib is not None:
        if not os.path.exists(args.calib):
            raise ConfigError(f"calibration file not found: {args.calib}")
        from .calib import CalibResult

        calib = CalibResult.load(args.calib)
    report = run_from_config(cfg, calib)
    os.makedirs(args.out, exist_ok=True)
    report.write_errors_csv(os.path.join(args.out, "errors.csv"))
    report.write_json(os.path.join(args.out, "report.json"))
    if args.export_cache and report.last_cache is not None:
        from .residuals import export_cache

        export_cache(report.last_cache, args.out)
    if args.spectrum:
        write_spectrum_csv(spectrum_from_config(cfg, calib),
                           os.path.join(args.out, "spectrum.csv"))
    print(f"report written to {args.out}")
    for mode in ("none", "first", "second", "ssar"):
        print(f"  {mode:>6}: mean frob err {report.mean_error(mode):.6e}, "
              f"cost fraction {report.cost_fraction[mode]:.3f}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if not os.path.exists(args.grid):
        raise ConfigError(f"grid file not found: {args.grid}")
    with open(args.grid) as fh:
        try:
            grid = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"grid file {args.grid} is not valid JSON: {exc}") from exc
    keys, results = sweep(cfg, grid, calibrate=not args.no_calib)
    write_sweep_csv(keys, results, args.out)
    failures = sum(1 for _, _, err in results if err)
    print(f"sweep table written to {args.out} ({len(results)} cells, {failures} failed)")
    return 0


def _cmd_report(args) -> int:
    path = os.path.join(args.in_dir, "report.json")
    if not os.path.exists(path):
        raise ConfigError(f"report file not found: {path}")
    with open(path) as fh:
        payload = json.load(fh)
    if args.format == "json":
        summary = {k: payload[k] for k in
                   ("primary_mode", "mean_frob", "median_psnr", "cost_fraction")}
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(["mode", "mean_frob", "median_psnr", "cost_fraction"])
        for mode in ("none", "first", "second", "ssar"):
            writer.writerow([mode, payload["mean_frob"][mode],
                             payload["median_psnr"][mode], payload["cost_fraction"][mode]])
    return 0


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_report(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
