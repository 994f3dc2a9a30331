#!/usr/bin/env python3
"""How much signal does tournament annotation add as annotator noise grows?

Sweeps the simulated annotator's noise level and reports how often the
true weight-nearest candidate still wins its group, plus the triplet
counts. Useful for sizing a real annotation campaign.

Usage: python scripts/annotation_scaling.py [--groups N] [--size P]
"""

import argparse

import numpy as np

from retarget.tournament import augment, create_tournament, run_simulated_tournament
from retarget.translate import CorrespondenceGroup


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--groups", type=int, default=40)
    parser.add_argument("--size", type=int, default=16)
    parser.add_argument("--controllers", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'sigma':>6} {'champion=best':>14} {'manual':>7} {'augmented':>10} {'excluded':>9}")
    for sigma in (0.0, 0.05, 0.1, 0.2, 0.4):
        hits = manual = augmented = excluded = 0
        for k in range(args.groups):
            member_ids = [f"g{k}_c{i}" for i in range(args.size)]
            group = CorrespondenceGroup(
                group_id=f"g{k}",
                anchor_id=f"h{k}",
                anchor_code=rng.normal(size=25),
                dt_code=rng.normal(size=25),
                member_ids=member_ids,
                member_codes=rng.normal(size=(args.size, 25)),
            )
            weights = {mid: rng.uniform(size=args.controllers) for mid in member_ids}
            anchor_w = rng.uniform(size=args.controllers)
            t = create_tournament(group, seed=args.seed + k)
            records = run_simulated_tournament(t, anchor_w, weights, sigma, seed=args.seed + k)
            best = min(weights, key=lambda mid: np.linalg.norm(weights[mid] - anchor_w))
            hits += int(t.champion == best)
            manual += sum(1 for r in records if r.choice != "draw")
            augmented += len(augment(t))
            excluded += sum(1 for m in t.matches if m.excluded)
        print(f"{sigma:>6.2f} {hits / args.groups:>13.0%} {manual:>7} {augmented:>10} {excluded:>9}")


if __name__ == "__main__":
    main()
