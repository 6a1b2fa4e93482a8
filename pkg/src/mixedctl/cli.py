"""Command line entry point: ``mixedctl <subcommand> --config <path> [--out DIR] [--seed N] [--workers K]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import KINDS, ConfigError, parse_config, validate
from .runner import EXIT_CONFIG, OUTPUT_ROOT_ENV, run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixedctl",
        description="Mixed local/nonlocal diffusion: operators, solvers, spectra and boundary control.",
        epilog=f"Default output root: ${OUTPUT_ROOT_ENV} (else ./runs), one directory per experiment.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, help="process cap for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if cfg.kind != args.command:
            raise ConfigError([f"kind: config declares {cfg.kind!r} but the subcommand is {args.command!r}"])
        if args.seed is not None:
            raw = cfg.to_dict()
            raw["seed"] = args.seed
            cfg = validate(raw, cfg.base_dir)
        if args.workers is not None and args.workers < 1:
            raise ConfigError([f"--workers: {args.workers} outside admissible range [1, inf)"])
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    manifest = run(cfg, args.out, workers=args.workers)
    for check in manifest.checks:
        print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.value}")
    for child in manifest.children:
        print(f"{'PASS' if child['exit_code'] == 0 else 'FAIL'} {child['name']} ({child['kind']})")
    if manifest.error:
        print(f"error: {manifest.error}", file=sys.stderr)
    print(f"manifest: {manifest.out_dir / 'manifest.json'}")
    return manifest.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
