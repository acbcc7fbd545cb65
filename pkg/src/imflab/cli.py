"""Command line: ``imflab run|sweep|verify-geometry|version``.

Exit codes: 0 all certificates pass, 1 a certificate failed (reports are
still written), 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .experiment import (
    ConfigError,
    ExperimentConfig,
    _dump,
    format_float,
    load_config,
    run_experiment,
    write_report,
)
from .oracle import NonConvergenceError
from .tensor import (
    DomainError,
    InfiniteDivergenceError,
    SingularConditioningError,
    StateSpace,
    ValidationError,
)
from .theory import DEFAULT_TOL, check_lemma3

log = logging.getLogger("imflab")

EXIT_OK, EXIT_CERT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
NUMERIC_ERRORS = (NonConvergenceError, SingularConditioningError, InfiniteDivergenceError, FloatingPointError)
CONFIG_ERRORS = (ConfigError, ValidationError, DomainError)


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _output_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.output_dir or cfg.output.directory)


def _run_one(cfg: ExperimentConfig, tolerance, out: Path) -> tuple:
    """Worker: returns (exit code, report or None, message)."""
    try:
        report = run_experiment(cfg, tolerance)
    except CONFIG_ERRORS as exc:
        return EXIT_CONFIG, None, f"configuration error: {exc}"
    except NUMERIC_ERRORS as exc:
        return EXIT_NUMERIC, None, f"numerical failure: {exc}"
    write_report(report, out, cfg.output.formats)
    failed = [c["name"] for c in report.certificates if not c["passed"]]
    code = EXIT_OK if report.passed else EXIT_CERT
    msg = "all certificates pass" if not failed else f"failed certificates: {', '.join(failed)}"
    return code, report, msg


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.generator is not None and cfg.generator.seeds is not None:
        print("configuration error: seed list given; use 'sweep'", file=sys.stderr)
        return EXIT_CONFIG
    out = _output_dir(args, cfg)
    code, report, msg = _run_one(cfg, args.tolerance_override, out)
    if report is None:
        print(msg, file=sys.stderr)
        return code
    c = report.constants
    _say(args, f"m={c['m']:.6g} contraction={c['contraction']!r} KL(p0||p*)={report.oracle['kl_p0']:.6g} "
               f"KL(final)={report.oracle['kl_final']:.6g} iterations={report.oracle['iterations_run']}")
    for cert in report.certificates:
        _say(args, f"  {cert['name']:<10} {'PASS' if cert['passed'] else 'FAIL'}  min slack {format_float(cert['min_slack'])}")
    _say(args, f"{msg}; reports in {out}")
    log.info("timings %s", {k: round(v, 4) for k, v in report.timings.items()})
    return code


SWEEP_COLUMNS = ("instance", "seed", "cardinality", "interior_count", "m", "contraction", "kl_ratio", "worst_slack", "passed", "exit_code")


def cmd_sweep(args) -> int:
    try:
        cfg = load_config(args.config)
        if cfg.generator is None:
            raise ConfigError("sweep needs a generator instance")
        seeds = cfg.generator.seeds if cfg.generator.seeds is not None else (cfg.generator.seed,)
        if not seeds:
            raise ConfigError("empty seed list")
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = _output_dir(args, cfg)
    jobs = [(cfg.with_seed(i, s), args.tolerance_override, out / f"seed_{s}") for i, s in enumerate(seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]

    rows, worst, first_failure = [], {}, None
    for i, ((code, report, msg), (sub, _, _)) in enumerate(zip(results, jobs)):
        g = sub.generator
        row = {"instance": i, "seed": g.seed, "cardinality": g.cardinality, "interior_count": g.interior_count}
        if report is not None:
            row.update(
                m=report.constants["m"],
                contraction=report.constants["contraction"],
                kl_ratio=report.per_step_ratio(),
                worst_slack=min((c["min_slack"] for c in report.certificates if c["min_slack"] is not None), default=None),
                passed=report.passed,
            )
            for cert in report.certificates:
                if cert["min_slack"] is not None:
                    worst[cert["name"]] = min(worst.get(cert["name"], float("inf")), cert["min_slack"])
        else:
            row.update(m=None, contraction=None, kl_ratio=None, worst_slack=None, passed=False)
        row["exit_code"] = code
        rows.append(row)
        if code != EXIT_OK and first_failure is None:
            first_failure = (code, g.seed, msg)
        _say(args, f"seed {g.seed:>5} |X|={g.cardinality} N={g.interior_count}: {msg}")

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([format_float(r[c]) if isinstance(r[c], float) or r[c] is None else r[c] for c in SWEEP_COLUMNS])
    summary = {
        "instances": len(rows),
        "passed": first_failure is None,
        "worst_slack_per_certificate": worst,
        "first_failure": None if first_failure is None else {"exit_code": first_failure[0], "seed": first_failure[1], "message": first_failure[2]},
    }
    (out / "sweep_summary.json").write_text(_dump(summary))
    _say(args, f"{len(rows)} instances; {'all pass' if first_failure is None else 'failures present'}; summary in {out}")
    return EXIT_OK if first_failure is None else first_failure[0]


def cmd_verify_geometry(args) -> int:
    try:
        space = StateSpace(args.cardinality, args.interior)
    except DomainError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.trials <= 0:
        log.warning("no trials requested; certificate passes vacuously")
    tol = DEFAULT_TOL if args.tolerance_override is None else args.tolerance_override
    report = check_lemma3(space, args.trials, args.seed, tol)
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "geometry.json").write_text(_dump(report.as_dict()))
    for c in report.checks:
        _say(args, f"  {c.name:<24} {'PASS' if c.passed else 'FAIL'}  worst slack {format_float(c.slack)} over {c.count}")
    _say(args, f"|X|={args.cardinality} N={args.interior} trials={args.trials}: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_CERT


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output-dir", default=None)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--tolerance-override", type=float, default=None, help="absolute slack tolerance for inequality checks")

    parser = argparse.ArgumentParser(prog="imflab", description="Iterative Markovian Fitting laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="solve one instance and certify")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run a seeded sweep")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-geometry", parents=[common], help="subspace projection inequality only")
    p.add_argument("--cardinality", type=int, required=True)
    p.add_argument("--interior", type=int, required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_geometry)

    p = sub.add_parser("version")
    p.set_defaults(func=lambda args: print(__version__) or EXIT_OK)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
