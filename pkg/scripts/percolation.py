"""Push percolation after convergence: community coverage per round after one injection."""

import argparse
import math
import random

from interest_gossip.simnet import Injection, SimConfig, run
from interest_gossip.workload import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--peers", type=int, default=200)
    ap.add_argument("--communities", type=int, default=4)
    ap.add_argument("--theta-rec", type=float, default=0.0)
    ap.add_argument("--inject-round", type=int, default=30)
    ap.add_argument("--after", type=int, default=8, help="rounds to follow after the injection")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()

    print("seed,community_size,budget,rounds_to_90pct,coverage_by_round")
    for seed in range(args.seeds):
        wl = generate(args.peers, args.communities, 1, 12, 0.1, seed)
        (comm,) = wl.ground_truth[0]
        size = len(wl.members(comm))
        item = wl.fresh_item(comm, "new", random.Random(seed))
        cfg = SimConfig(peers=args.peers, rounds=args.inject_round + args.after + 1, seed=seed,
                        theta_rec=args.theta_rec,
                        injections=(Injection(args.inject_round, 0, item, comm),))
        rep = run(cfg, wl)
        cov = [rec.coverage.get("new", 0.0) for rec in rep.records[args.inject_round:]]
        reach = rep.summary["items"]["new"]["rounds_to_90pct"]
        print(f"{seed},{size},{math.ceil(3 * math.log2(size))},{reach},"
              + ";".join(f"{c:.3f}" for c in cov))


if __name__ == "__main__":
    main()
