"""Command-line entry point: one subcommand per experiment kind."""

from __future__ import annotations

import argparse
import os
import sys

OUT_ENV = "CONTEXTWIN_OUT"

# name -> (help, runtime class); kept here so --help needs no numpy import
KIND_HELP = {
    "oracle-dump": ("Whittle table and lambda-grid membership per arm type", "seconds"),
    "check-indexability": ("indexability, advantage ordering and threshold monotonicity report", "seconds"),
    "train-neurwin": ("train one index network on one arm", "seconds to minutes"),
    "train-contextwin": ("train a gated mixture of index networks over all arms", "minutes"),
    "evaluate": ("discounted reward of oracle, baseline and learned policies", "seconds"),
    "lemma2-test": ("Monte Carlo update mean against finite-difference gradients", "about a minute"),
    "lemma3-sweep": ("update variance against mini-batch size", "under a minute"),
    "theorem3-curve": ("gradient-norm running average, c/sqrt(B) fit and trend test", "seconds to minutes"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contextwin", description=__doc__)
    sub = parser.add_subparsers(dest="kind", metavar="KIND")
    for kind, (text, runtime) in KIND_HELP.items():
        p = sub.add_parser(kind, help=f"{text} [runtime: {runtime}]",
                           description=f"{text}. Expected runtime with default config: {runtime}.")
        p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or runs/<kind>)")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
        p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in KIND_HELP and not argv[0].startswith("-"):
        if argv:
            print(f"contextwin: unknown experiment kind {argv[0]!r}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.kind is None:
        parser.print_usage(sys.stderr)
        return 2
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(args.threads)

    # numpy is imported only after the thread variables are set
    from .config import ConfigError, ExperimentConfig, load_config
    from .experiments import run_experiment

    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    except (ConfigError, OSError) as exc:
        print(f"contextwin: config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or os.environ.get(OUT_ENV) or os.path.join("runs", args.kind)
    try:
        manifest = run_experiment(args.kind, cfg, out, args.seed, args.threads, log, args.config)
    except Exception as exc:  # surfaced as a one-line error plus nonzero exit
        print(f"contextwin: {args.kind} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(f"wrote {', '.join(sorted(manifest['files']))} and manifest.json to {out}", file=sys.stderr)
    return 0
