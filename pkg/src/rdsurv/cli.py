"""Command-line interface.

Three subcommands — ``analyze``, ``simulate-study``, ``diagnose`` — map
onto the three pipeline drivers.  Every run-configuration field is a
kebab-case flag; ``--config`` loads the same fields from a JSON file
first, with explicit flags taking precedence.
"""

from __future__ import annotations

import argparse
import json
import sys

from .pipeline import RunConfig, run_analysis, run_diagnostics

__all__ = ["build_parser", "config_from_args", "main"]


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="JSON", help="JSON file of run-configuration fields;"
                     " explicit flags override it")
    sub.add_argument("--out-dir", help="directory for result files (default: results)")
    sub.add_argument("--seed", type=int, help="master seed; every random stage derives from it")
    sub.add_argument("--jobs", type=int, help="worker processes for within-stage parallelism")
    sub.add_argument("--horizon", type=int, help="follow-up horizon in days (default: 270)")


def _add_data(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--patients", help="patients CSV")
    sub.add_argument("--fills", help="fills CSV")
    sub.add_argument("--events", help="events CSV")
    sub.add_argument("--u-star", type=int, help="cutoff day of the generic entry")
    sub.add_argument("--washout-days", type=int, help="minimum gap to a prior fill, if enforced")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdsurv",
        description="Counterfactual survival around the generic-entry cutoff:"
        " estimation, simulation study, and diagnostics.",
    )
    subs = parser.add_subparsers(dest="mode", required=True)

    analyze = subs.add_parser("analyze", help="fit the full estimation pipeline on claims CSVs")
    _add_common(analyze)
    _add_data(analyze)
    analyze.add_argument("--h", type=float, nargs="+", dest="h",
                         help="kernel bandwidth(s) in days, e.g. --h 365 730 2920")
    analyze.add_argument("--M", type=int, dest="M", help="simulated paths per curve")
    analyze.add_argument("--R", type=int, dest="R", help="bootstrap resamples")
    analyze.add_argument("--P", type=int, dest="P", help="sample partitions analyzed separately")
    analyze.add_argument("--fill-cost", type=float,
                         help="per-fill regime cost (default: median observed)")
    analyze.add_argument("--ci-multiplier", type=float,
                         help="normal quantile for CIs (default 1.96)")

    study = subs.add_parser("simulate-study", help="run the adjustment-strategy simulation study")
    _add_common(study)
    study.add_argument("--scenario", help="scenario JSON; omit for the bundled linear+sine pair")
    study.add_argument("--replications", type=int, help="simulated datasets per scenario")
    study.add_argument("--n-patients", type=int, help="patients per simulated dataset")
    study.add_argument("--R", type=int, dest="R", help="bootstrap resamples per replication")
    study.add_argument("--h", type=float, nargs="+", dest="h", help="kernel bandwidth in days")
    study.add_argument("--ci-multiplier", type=float, help="normal quantile for CIs")

    diag = subs.add_parser("diagnose", help="secular-trend diagnostics from claims CSVs")
    _add_common(diag)
    _add_data(diag)

    return parser


def config_from_args(argv: list[str]) -> RunConfig:
    """Parse ``argv`` into a validated RunConfig (config file first, flags
    on top)."""
    args = vars(build_parser().parse_args(argv))
    mode = args.pop("mode")
    path = args.pop("config", None)
    fields = {}
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(RunConfig.__dataclass_fields__)
        if unknown:
            raise SystemExit(f"unknown config fields in {path}: {sorted(unknown)}")
        fields.update(loaded)
    fields.update({k: v for k, v in args.items() if v is not None})
    fields["mode"] = mode
    config = RunConfig(**fields)
    config.validate()
    return config


def main(argv: list[str] | None = None) -> int:
    config = config_from_args(sys.argv[1:] if argv is None else argv)
    if config.mode == "analyze":
        result = run_analysis(config)
        for band in result.bandwidths:
            lo, hi = band.ci
            print(f"h={band.h:g}: RMST difference {band.rmst_diff:+.2f} days "
                  f"(SE {band.rmst_se:.2f}, CI {lo:+.2f} to {hi:+.2f})")
        print(f"wrote {len(result.files)} files to {config.out_dir}")
    elif config.mode == "simulate-study":
        from .study import run_simulation_study

        report = run_simulation_study(config)
        print(report.to_text())
        print(f"wrote study files to {config.out_dir}")
    else:
        frames = run_diagnostics(config)
        for name, frame in frames.items():
            print(f"{name}: {len(frame)} rows")
        print(f"wrote diagnostic files to {config.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
