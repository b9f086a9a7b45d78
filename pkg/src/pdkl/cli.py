"""Command line entry point: ``pdkl <stage> --config FILE [--out DIR] [--stage-input DIR]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from pdkl.config import BUNDLED, bundled_config_path, load_config
from pdkl.errors import PdklError
from pdkl.pipeline import STAGES, run_pipeline, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdkl",
        description="Learn discrete peridynamic micro-moduli from coarse-grained FEM data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help="run all stages" if name == "pipeline" else f"run the {name} stage")
        p.add_argument("--config", required=True,
                       help=f"JSON config file, or a bundled name: {', '.join(BUNDLED)}")
        p.add_argument("--out", help="output directory (default: the config's out_dir)")
        if name not in ("simulate", "pipeline"):
            p.add_argument("--stage-input", help="directory holding earlier stage outputs (default: --out)")
    return parser


def _threads() -> int | None:
    raw = os.environ.get("PDKL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise PdklError(f"PDKL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise PdklError(f"PDKL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = bundled_config_path(args.config) if args.config in BUNDLED else Path(args.config)
        cfg = load_config(path)
        out = Path(args.out or cfg.out_dir)
        with threadpool_limits(limits=_threads()):
            if args.command == "pipeline":
                written = run_pipeline(cfg, out)
            else:
                stage_input = getattr(args, "stage_input", None)
                written = run_stage(args.command, cfg, out, stage_input and Path(stage_input))
    except (PdklError, OSError) as exc:
        print(f"pdkl {args.command}: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    print(f"pdkl {args.command}: wrote {len(written)} files under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
