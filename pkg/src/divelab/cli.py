"""Command-line entry point: ``divelab <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import THREADS_ENV, RunConfig
from .errors import (ArgumentError, ConfigError, ConsistencyError, DependencyError, DiveError,
                     FormatError)
from .pipeline import STAGES, Run, run_stage

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_VALIDATION = 4
EXIT_RUNTIME = 5


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="divelab", description="Region-guided image synthesis pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        c = sub.add_parser(name)
        c.add_argument("--config", help="JSON run configuration")
        c.add_argument("--seed", type=_u64)
        c.add_argument("--threads", type=int,
                       help=f"worker processes for guided generation (default: ${THREADS_ENV} or 1)")
        c.add_argument("--out", help="output directory")
        c.add_argument("-v", "--verbose", action="store_true")
        if name in ("generate", "all"):
            c.add_argument("--gamma", type=float, help="fixed guidance scale (disables calibration)")
        if name in ("generate", "rank"):
            c.add_argument("--voxel-set", action="append", dest="voxel_sets",
                           help="voxel set name; repeatable (default: all)")
        if name in ("cluster", "rank"):
            c.add_argument("--k", type=int)
        if name == "evaluate":
            c.add_argument("--tier", type=float, help="single tier fraction for both sources")
    return p


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out:
        cfg.out = args.out
    if getattr(args, "gamma", None) is not None:
        cfg.override("guidance.gamma", float(args.gamma))
    cfg.validate()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    logging.getLogger("PIL").setLevel(logging.INFO)  # per-chunk PNG debug lines are noise
    try:
        cfg = load_config(args)
        run = Run(cfg)
        options = {k: getattr(args, k, None) for k in ("voxel_sets", "k", "tier")}
        stages = STAGES if args.command == "all" else (args.command,)
        for stage in stages:
            opts = {}
            if stage in ("generate", "rank"):
                opts["voxel_sets"] = options["voxel_sets"]
            if stage in ("cluster", "rank"):
                opts["k"] = options["k"]
            if stage == "evaluate":
                opts["tier"] = options["tier"]
            frag = run_stage(run, stage, **opts)
            logging.info("%s done in %.1fs", stage, frag["seconds"])
    except ConfigError as err:
        print(f"config error [{err.key_path}]: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArgumentError, FormatError, ConsistencyError, DependencyError) as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except DiveError as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
