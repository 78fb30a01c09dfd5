"""Overlay quality under churn, with a lagged-oracle reference.

For each churn rate, reports the protocol's mean neighbor quality over a
round window. ``--bound`` adds a reference curve: an omniscient peer that
knows the exact top-C over the alive set as it was ``lag`` rounds earlier,
while a revived peer stays empty for ``lag + 1`` rounds (``empty_rounds``). Any protocol whose
information travels one hop per round is at least that stale, so this
reference upper-bounds what gossip can reach.
"""

import argparse
import math
import random

from interest_gossip.metrics import OracleIndex, neighbor_quality
from interest_gossip.simnet import SimConfig, run
from interest_gossip.workload import generate


def lagged_oracle(wl, rate, rounds, lag, seed, capacity, empty_rounds=None):
    empty_rounds = lag + 1 if empty_rounds is None else empty_rounds
    rng = random.Random(seed)
    peers = sorted(wl.profiles)
    alive = set(peers)
    history = [set(alive)] * (lag + 1)
    revived_at = {}
    idx = OracleIndex(capacity)
    out = []
    for r in range(rounds):
        died, back = [], []
        for p in peers:
            if rng.random() < rate:
                (died if p in alive else back).append(p)
        alive = (alive - set(died)) | set(back)
        revived_at.update((p, r) for p in back)
        history.append(set(alive))
        ideal = idx.top(wl.profiles, alive)
        stale = idx.top(wl.profiles, history[-1 - lag])
        actual = {k: v for k, v in stale.items()
                  if k[0] in alive and r - revived_at.get(k[0], -10**9) >= empty_rounds}
        out.append(neighbor_quality(actual, ideal, capacity))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--rates", default="0,0.01,0.02,0.05,0.1")
    ap.add_argument("--rounds", type=int, default=61)
    ap.add_argument("--window", default="40,60")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--capacity", type=int, default=8)
    ap.add_argument("--bound", default="", help="comma-separated lags for the reference, e.g. 1,2,3")
    args = ap.parse_args()
    lo, hi = (int(x) for x in args.window.split(","))
    lags = [int(x) for x in args.bound.split(",") if x]

    print("rate,protocol" + "".join(f",oracle_lag{k}" for k in lags))
    for rate in (float(x) for x in args.rates.split(",")):
        proto_q, bound_q = [], {k: [] for k in lags}
        for seed in range(args.seeds):
            wl = generate(200, 4, 1, 12, 0.1, seed)
            rep = run(SimConfig(peers=200, capacity=args.capacity, rounds=args.rounds,
                                churn=rate, seed=seed), wl)
            proto_q.append(math.fsum(r.quality for r in rep.records[lo:hi + 1]) / (hi - lo + 1))
            for k in lags:
                q = lagged_oracle(wl, rate, args.rounds, k, seed, args.capacity)
                bound_q[k].append(math.fsum(q[lo:hi + 1]) / (hi - lo + 1))
        cells = [math.fsum(proto_q) / len(proto_q)] + [math.fsum(v) / len(v) for v in bound_q.values()]
        print(f"{rate}," + ",".join(f"{c:.4f}" for c in cells))


if __name__ == "__main__":
    main()
