"""Command line entry point.

Exit codes: 0 success, 1 a verification suite failed, 2 bad input,
3 the privacy barrier tripped during a run.  Data goes to stdout,
diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import ConfigError, JobConfig, template, validate
from .taint import PrivacyViolation

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PRIVACY = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(path: str) -> JobConfig:
    cfg = JobConfig.load(path)
    validate(cfg)
    return cfg


def _report_config_error(exc: ConfigError) -> int:
    for field, msg in exc.problems:
        _err(f"config error: {field}: {msg}")
    return EXIT_USAGE


def cmd_run(args) -> int:
    from .simnet import run_job

    try:
        cfg = _load(args.config)
        if args.seed_override is not None:
            cfg.seed = args.seed_override
            validate(cfg)
    except ConfigError as exc:
        return _report_config_error(exc)
    except OSError as exc:
        _err(f"cannot read config: {exc}")
        return EXIT_USAGE
    try:
        res = run_job(cfg)
    except PrivacyViolation as exc:
        _err(f"privacy violation: {exc}")
        return EXIT_PRIVACY
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(res.metrics_csv())
    (out / "final_model.blob").write_bytes(res.final_model_blob)
    (out / "provisioning.log").write_text(res.provisioning_log())
    (out / "taint.log").write_text(res.taint_log_text())
    print(
        f"mode={cfg.mode} N={cfg.n_training} iterations={res.final_state.step} "
        f"eval_accuracy={res.eval_accuracy:.4f} simulated_time={res.total_time!r}"
    )
    return EXIT_OK


def parse_range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    a = int(lo)
    b = int(hi) if sep else a
    return range(a, b + 1)


def cmd_costmodel(args) -> int:
    from .costmodel import CostParams, sweep

    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        return _report_config_error(exc)
    except OSError as exc:
        _err(f"cannot read config: {exc}")
        return EXIT_USAGE
    try:
        ns = parse_range(args.n)
        cs = [int(c) for c in args.c.split(",") if c.strip()]
    except ValueError as exc:
        _err(f"bad range: {exc}")
        return EXIT_USAGE
    if not ns or ns.start < 1:
        _err(f"empty or non-positive n range {args.n!r}")
        return EXIT_USAGE
    if not cs or any(c < 2 for c in cs):
        _err(f"c list must be non-empty with every c >= 2, got {args.c!r}")
        return EXIT_USAGE
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["n", "c", "t_mask", "t_tree", "recommended"])
    for n, c, tm, tt, rec in sweep(CostParams.from_config(cfg), ns, cs):
        w.writerow([n, c, repr(tm), repr(tt), rec])
    return EXIT_OK


def cmd_verify(args) -> int:
    from .acceptance import SUITES, run_suite

    if args.suite not in SUITES:
        _err(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
        return EXIT_USAGE
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
        for f in r.failures:
            _err(f"  {r.name}: {f}")
    return EXIT_OK if all(r.passed and r.within_limit for r in results) else EXIT_FAIL


def cmd_gen_config(args) -> int:
    try:
        cfg = template(args.template)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    print(cfg.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="teeagg", description="Simulated enclave training with masked or tree aggregation.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a job and write metrics and logs")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed-override", type=int, default=None)
    run.set_defaults(func=cmd_run)

    cm = sub.add_parser("costmodel", help="tabulate iteration-time estimates")
    cm.add_argument("--config", required=True)
    cm.add_argument("--n", required=True, help="range a..b")
    cm.add_argument("--c", required=True, help="comma separated children counts")
    cm.set_defaults(func=cmd_costmodel)

    ver = sub.add_parser("verify", help="run an acceptance suite")
    ver.add_argument("--suite", required=True)
    ver.set_defaults(func=cmd_verify)

    gen = sub.add_parser("gen-config", help="print a config template")
    gen.add_argument("--template", required=True, choices=["mask", "tree", "ssp"])
    gen.set_defaults(func=cmd_gen_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
