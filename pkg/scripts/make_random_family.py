"""Write the 20-arm random positively-correlated family as an experiment config."""

import argparse

import numpy as np
import yaml

from contextwin.envs import random_partial_arm


def family_config(n: int, seed: int, chain_length: int, discount: float) -> dict:
    rng = np.random.default_rng(seed)
    arms = []
    for i in range(n):
        a = random_partial_arm(rng)
        arms.append({"name": f"random{i:02d}", "context": [1.0],
                     "belief": {"p01_pass": a.p01_pass, "p11_pass": a.p11_pass, "p01_act": a.p01_act,
                                "p11_act": a.p11_act, "chain_length": chain_length}})
    return {"bandit": {"budget": 1, "discount": discount, "arms": arms},
            "oracle": {"lambda_grid": {"start": -2.0, "stop": 2.0, "num": 101}, "strong_tol": 1e-8}}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="configs/random_family.yaml")
    p.add_argument("--arms", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chain-length", type=int, default=20)
    p.add_argument("--discount", type=float, default=0.95)
    args = p.parse_args()
    cfg = family_config(args.arms, args.seed, args.chain_length, args.discount)
    header = (f"# {args.arms} random positively-correlated arms (numpy default_rng({args.seed})), "
              f"chain length {args.chain_length}.\n# Generated by scripts/make_random_family.py; edit that, not this.\n")
    with open(args.out, "w") as fh:
        fh.write(header + yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None))


if __name__ == "__main__":
    main()
