"""
Ranks and quantiles of a distributed stream
===========================================

Every arrival carries a distinct key.  The rank tracker lets the coordinator
answer "how many keys seen so far are below x" within eps * n.  Sites cut
their input into chunks and ship small mergeable summaries up a dyadic tree;
a short random sample covers the unsummarized tail.
"""
import numpy as np

from disttrack import RankTracking, run_simulation
from disttrack.workloads import random_keys

k, eps, N = 16, 0.05, 200_000
w = random_keys(N, k, seed=5)
phis = [0.1, 0.25, 0.5, 0.75, 0.9]

res = run_simulation(RankTracking(eps), w, [N // 4 - 1, N - 1], seed=5, queries=phis)
print("    n    phi     true rank   estimate   |err|/n")
for r in res.records:
    n = r.t + 1
    print(f"{n:7d} {r.truth / n:5.2f} {r.truth:12.0f} {r.estimate:10.0f} {r.abs_err / n:9.4f}")

coord = res.coordinator
print(f"\nmessages {res.stats.messages}, words {res.stats.words}, chunks {len(coord.chunks)}")
g = coord.geom
print(f"last round geometry: block b={g.b}, chunk capacity {g.cap}, {g.blocks} blocks, tree height {g.height}")

# Quantiles come from a binary search over ranks.
for phi in (0.5, 0.99):
    key = coord.quantile(phi)
    print(f"estimated {phi}-quantile has true rank {int(w.rank([key], N - 1)[0]) / N:.4f} n")
