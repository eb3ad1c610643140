"""Command-line entry point: ``ages run | sweep | report``.

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, parse_axis_values
from .experiment import (
    SUMMARY_FILE,
    SWEEP_FILE,
    ReportError,
    execute,
    format_table,
    group_records,
    output_root,
    summary_table,
    write_curves,
    write_sweep,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("ages")


def _default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not on every platform
        return os.cpu_count() or 1


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ages", description="Adversarial gradient estimation experiments on mixture data.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--seed", type=_non_negative, help="override base_seed (trial t uses seed + t)")
        sp.add_argument("--trials", type=_positive, help="override the number of trials")
        sp.add_argument("--out", help="output directory (default: the config's out, relocated under $AGES_OUT when set)")
        sp.add_argument("--threads", type=_positive, default=_default_threads(), help="worker processes for trials")

    run = sub.add_parser("run", help="run all trials of one config")
    common(run)

    sw = sub.add_parser("sweep", help="run a config once per value of one axis")
    common(sw)
    sw.add_argument("--axis", required=True, choices=("divergence", "r0", "method"))
    sw.add_argument("--values", required=True, help="comma-separated values, e.g. 0,0.25,0.5")

    rep = sub.add_parser("report", help="tabulate results files and write curve data")
    rep.add_argument("paths", nargs="+", help="results.csv files or directories containing them")
    rep.add_argument("--out", help="directory for curves.csv and table.txt (default: $AGES_OUT/report or ./report)")
    rep.add_argument("--metrics", help="comma-separated metric columns to show")
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.base_seed = args.seed
        cfg.raw["base_seed"] = args.seed
    if args.trials is not None:
        cfg.trials = args.trials
        cfg.raw["trials"] = args.trials
    return cfg


def _print_summary(title: str, summary: dict, out=sys.stdout) -> None:
    print(title, file=out)
    for m, (mean, se, n) in summary.items():
        if mean is None:
            continue
        se_txt = "" if se is None else f" +- {se:.4f}"
        print(f"  {m:<16} {mean:.4f}{se_txt}  (n={n})", file=out)


def cmd_run(args) -> int:
    cfg = _load(args)
    out = output_root(args.out, cfg.out)
    log.info("running %s: %d trial(s) -> %s", cfg.name, cfg.trials, out)
    outcome = execute(cfg, out, args.threads)
    _print_summary(f"{cfg.name} [{cfg.hash()}]", outcome.summary)
    for r in outcome.results:
        if r.failed:
            print(f"trial {r.trial}: FAILED ({r.error})", file=sys.stderr)
    print(f"wrote {out / SUMMARY_FILE}")
    return EXIT_RUNTIME if outcome.failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = parse_axis_values(args.axis, args.values)
    # validate every value before spending compute
    subs = [(v, cfg.with_value(args.axis, v)) for v in values]
    out = output_root(args.out, cfg.out)
    failed = False
    per_value = []
    for v, sub in subs:
        sub_out = out / f"{args.axis}={v}"
        outcome = execute(sub, sub_out, args.threads)
        failed |= outcome.failed
        per_value.append((v, outcome.summary))
        _print_summary(f"{args.axis}={v} [{sub.hash()}]", outcome.summary)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(out / SWEEP_FILE, per_value)
    print(f"wrote {out / SWEEP_FILE}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args) -> int:
    groups = group_records(args.paths)
    if not groups:
        raise ReportError("no results rows found in " + ", ".join(args.paths))
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    header, rows = summary_table(groups, metrics)
    table = format_table(header, rows)
    print(table)
    out = output_root(args.out, "report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table + "\n")
    write_curves(out / "curves.csv", groups)
    print(f"wrote {out / 'table.txt'} and {out / 'curves.csv'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; map to the validation code
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
