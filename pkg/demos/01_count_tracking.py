"""
Tracking a distributed count
============================

k sites each see part of a stream.  A coordinator wants to know the total
number of arrivals n at all times, within a factor (1 +- eps), while the
sites send as few messages as possible.

This walk-through runs the randomized tracker next to the deterministic
"report every (1 + eps) growth" baseline and compares the bills.
"""
import numpy as np

from disttrack import CountTracking, DetCount, run_simulation
from disttrack.harness import growth_probes
from disttrack.workloads import one_way_hard, round_robin

eps, N = 0.05, 10**6

# the workload decides which site receives each arrival; round robin is the
# friendliest case, one_way_hard sends everything to one site or spreads it
# evenly depending on a coin flip
workloads = {f"round_robin k={k}": round_robin(N, k) for k in (16, 256)}
workloads["one_way_hard k=256"] = one_way_hard(N, 256, seed=3)

# probes are arrival indices where the coordinator's answer is recorded
probes = growth_probes(N, eps)
print(f"{len(probes)} probes, one per (1 + eps) growth of n")

for name, w in workloads.items():
    for proto in (CountTracking(eps), DetCount(eps)):
        res = run_simulation(proto, w, probes, seed=7, keep_log=False)
        rel = np.array([r.abs_err / r.truth for r in res.records])
        print(f"{name:19s} {type(proto).__name__:13s} messages {res.stats.messages:7d}   "
              f"worst relative error {rel.max():.4f}   probes outside eps: {np.mean(rel > eps):.3f}")

# The randomized tracker pays roughly c_p sqrt(k)/eps per doubling of n with
# c_p = 4, the deterministic one roughly k/eps per factor e of growth.  At
# this eps the two break even near k = 256; past that the sqrt(k) growth
# wins (demos/06_cost_scaling.py).  When one site gets everything the
# deterministic baseline is nearly free.  Its answer never overshoots; the
# randomized one is unbiased and lands within eps with high probability.

# Boosting: run an odd number of independent copies and take the median
# per probe.  Copy c uses the seed copy_seed(seed, c).
from disttrack.count import copy_seed, median_boost

w = workloads["round_robin k=256"]
copies = [run_simulation(CountTracking(eps), w, probes, seed=copy_seed(7, c), keep_log=False) for c in range(5)]
boosted = [median_boost(r.records[i].estimate for r in copies) for i in range(len(probes))]
err = np.abs(np.array(boosted) - (np.array(probes) + 1)) / (np.array(probes) + 1)
print(f"median of 5 copies: worst relative error {err.max():.4f}, "
      f"total messages {sum(r.stats.messages for r in copies)}")
