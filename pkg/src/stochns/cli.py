"""Command line entry point: ``stochns run|resume|validate``.

Exit codes: 0 all checks passed, 2 a check failed, 3 integration blowup,
4 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import load_config, parse_config
from .errors import ConfigError, IntegrationBlowup
from .experiments import run_experiment
from .io import read_checkpoint_header, write_csv

EXIT_OK, EXIT_CHECK, EXIT_BLOWUP, EXIT_CONFIG = 0, 2, 3, 4

log = logging.getLogger("stochns")


def _write_summary(out, payload):
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _execute(spec, out, resume=None, base_dir="."):
    os.makedirs(out, exist_ok=True)
    chash = spec.sim.config_hash()
    with open(os.path.join(out, "resolved.ini"), "w", encoding="utf-8") as fh:
        fh.write(spec.resolved_text())
    summary = {"name": spec.name, "kind": spec.kind, "config_hash": chash}
    extra = {"base_dir": os.path.abspath(base_dir), "output_dir": os.path.abspath(out)}
    try:
        res = run_experiment(spec, checkpoint_dir=out, resume=resume, extra=extra)
    except IntegrationBlowup as e:
        summary.update(status="blowup", error=str(e), time=e.time, trajectory=e.trajectory)
        _write_summary(out, summary)
        log.error("blowup: %s", e)
        return EXIT_BLOWUP
    for stem, table in res.tables.items():
        if "csv" in spec.formats:
            write_csv(os.path.join(out, f"{stem}.csv"), table, chash)
    summary["status"] = "pass" if res.passed else "fail"
    summary["checks"] = [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in res.checks]
    summary["failed"] = [c.name for c in res.checks if not c.passed]
    _write_summary(out, summary)
    for c in res.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    return EXIT_OK if res.passed else EXIT_CHECK


def cmd_run(args):
    spec = load_config(args.config)
    out = args.output or spec.output_dir
    return _execute(spec, out, base_dir=os.path.dirname(os.path.abspath(args.config)))


def cmd_resume(args):
    try:
        header, _, _ = read_checkpoint_header(args.checkpoint)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {e}") from None
    extra = header.get("extra", {})
    base_dir = extra.get("base_dir", ".")
    spec = parse_config(header["resolved_config"], base_dir=base_dir)
    if spec.sim.config_hash() != header["config_hash"]:
        raise ConfigError("checkpoint config hash does not match its resolved configuration")
    out = args.output or extra.get("output_dir") or spec.output_dir
    log.info("resuming %s at t=%g", spec.name, header["t"])
    return _execute(spec, out, resume=args.checkpoint, base_dir=base_dir)


def cmd_validate(args):
    spec = load_config(args.config)
    sys.stdout.write(spec.resolved_text())
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="stochns", description="Stochastic Navier-Stokes experiments on the torus")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides experiment.output_dir)")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("resume", help="continue from a checkpoint file")
    s.add_argument("checkpoint")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_resume)
    v = sub.add_parser("validate", help="check a config and print the resolved form")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(json.dumps({"status": "config_error", "error": str(e)}), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
