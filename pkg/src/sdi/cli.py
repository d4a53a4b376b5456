"""Command-line interface: ``sdi {run,compare,sweep-alpha,folk-theorem,verify}``.

Exit codes: 0 success, 1 usage or configuration error, 2 non-convergence,
3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments, io
from .config import RunConfig
from .errors import ConfigError, SDIError
from .verify import format_table, verify_config

DEFAULT_CONFIG = '[target]\nkind = "logistic"\n\n[method]\nname = "ep_classical"\n'

log = logging.getLogger("sdi")


def _cmd_verify(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    checks = verify_config(cfg)
    io.write_json(out / "verify.json", checks)
    print(format_table(checks))
    failed = [c["check"] for c in checks if not c["pass"]]
    if failed:
        print(f"{len(failed)} of {len(checks)} checks failed", file=sys.stderr)
        return experiments.EXIT_VERIFY_FAILED
    print(f"all {len(checks)} checks passed")
    return experiments.EXIT_OK


COMMANDS = {
    "run": (experiments.cmd_run, "iterate one method to convergence; writes trace.csv and summary.json"),
    "compare": (experiments.cmd_compare, "run several methods on one target; writes comparison.csv"),
    "sweep-alpha": (experiments.cmd_sweep_alpha, "alpha fixed points versus the GVB fixed point"),
    "folk-theorem": (experiments.cmd_folk_theorem, "EP on tempered targets versus GVB"),
    "verify": (_cmd_verify, "run the invariant battery; writes verify.json"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set method.name=gvb (repeatable)")
    common.add_argument("--output-dir", type=Path, help="directory for all outputs (default: sdi-output)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="sdi", description="Smoothed-gradient Gaussian approximations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            cfg = RunConfig.load(args.config, args.overrides)
        else:
            cfg = RunConfig.from_text(DEFAULT_CONFIG, args.overrides)
        out = cfg.output_dir(args.output_dir)
        fn, _ = COMMANDS[args.command]
        return fn(cfg, Path(out))
    except ConfigError as exc:
        print(f"sdi: config error: {exc}", file=sys.stderr)
    except (SDIError, ValueError, TypeError) as exc:
        print(f"sdi: error: {exc}", file=sys.stderr)
    return experiments.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
