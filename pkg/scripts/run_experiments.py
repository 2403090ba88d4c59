"""Run every shipped experiment config once and print its summary line."""

import argparse
import json
import sys
from pathlib import Path

from contextwin.harness.config import load_config
from contextwin.harness.experiments import run_experiment

ROOT = Path(__file__).resolve().parents[1]

PLAN = [
    ("check-indexability", "random_family.yaml"),
    ("oracle-dump", "standard.yaml"),
    ("evaluate", "standard.yaml"),
    ("lemma2-test", "lemma2.yaml"),
    ("lemma3-sweep", "lemma3.yaml"),
    ("theorem3-curve", "theorem3.yaml"),
    ("train-contextwin", "contextwin_clusters.yaml"),
]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs", help="parent directory for per-experiment outputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="*", help="subset of experiment kinds to run")
    args = p.parse_args()
    for kind, cfg_file in PLAN:
        if args.only and kind not in args.only:
            continue
        cfg_path = ROOT / "configs" / cfg_file
        out = Path(args.out) / kind
        man = run_experiment(kind, load_config(cfg_path), out, args.seed,
                             log=lambda m: print(f"  {m}", file=sys.stderr), config_path=str(cfg_path))
        print(f"{kind}: {man['wall_time_s']:.1f}s -> {out}")
        print("  " + json.dumps(man["summary"], default=str)[:400])


if __name__ == "__main__":
    main()
