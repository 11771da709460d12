"""Command-line driver: solve / profile / cover / verify / refine.

Reports are deterministic for a fixed manifest and seed; --threads is
accepted for interface compatibility and recorded, but results never depend
on it (all reductions are ordered).
"""

from __future__ import annotations

import argparse
import os
import sys

from .report import ManifestError, RunManifest, cmd_cover, cmd_profile, \
    cmd_refine, cmd_solve, cmd_verify

COMMANDS = {
    "solve": cmd_solve,
    "profile": cmd_profile,
    "cover": cmd_cover,
    "verify": cmd_verify,
    "refine": cmd_refine,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdelab",
        description="Verification lab for the singular porous-medium equation")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--manifest", metavar="PATH",
                        help="JSON manifest; omitted fields use defaults")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (default: manifest value, env "
                             "FDELAB_OUT, or ./out)")
    parser.add_argument("--seed", type=int, metavar="N")
    parser.add_argument("--suite", metavar="NAME[,NAME...]",
                        help="comma-separated suite selection for verify/refine")
    parser.add_argument("--levels", type=int, metavar="K",
                        help="refinement levels (1..4)")
    parser.add_argument("--threads", type=int, default=1, metavar="N",
                        help="accepted and recorded; results are thread-count "
                             "invariant")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.manifest:
            manifest = RunManifest.from_json(args.manifest)
        else:
            manifest = RunManifest()
        manifest.command = args.command
        if args.out:
            manifest.out_dir = args.out
        elif manifest.out_dir == "out":
            manifest.out_dir = os.environ.get("FDELAB_OUT", "out")
        if args.seed is not None:
            manifest.seed = args.seed
        if args.levels is not None:
            manifest.levels = args.levels
        if args.suite is not None:
            manifest.suites = tuple(s.strip() for s in args.suite.split(",")
                                    if s.strip())
        manifest.threads = args.threads
        manifest.validate()
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](manifest)


if __name__ == "__main__":
    sys.exit(main())
