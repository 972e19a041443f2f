"""
How the bills scale
===================

Message totals for the three count-style trackers as the number of sites
grows: the deterministic baseline grows about linearly in k, the randomized
tracker about like sqrt(k), and the priority-sampling baseline hardly moves
with k (it pays about 1/eps^2 instead).
"""
import numpy as np

from disttrack import CountTracking, DetCount, PrioritySample, run_simulation
from disttrack.harness import loglog_fit
from disttrack.workloads import round_robin

eps, N, seeds = 0.05, 10**6, range(5)
ks = [4, 16, 64, 256]
protocols = {"deterministic": DetCount(eps), "randomized": CountTracking(eps), "priority sample": PrioritySample(eps)}

print(f"{'k':>5s}" + "".join(f"{name:>18s}" for name in protocols))
table = {name: [] for name in protocols}
for k in ks:
    w = round_robin(N, k)
    row = []
    for name, proto in protocols.items():
        m = np.mean([run_simulation(proto, w, seed=s, keep_log=False).stats.messages for s in seeds])
        table[name].append(m)
        row.append(m)
    print(f"{k:5d}" + "".join(f"{m:18.0f}" for m in row))

print()
for name, ys in table.items():
    slope, _, ci = loglog_fit(ks, ys)
    print(f"{name:16s} log-log slope vs k: {slope:.2f}  (95% CI {ci[0]:.2f}..{ci[1]:.2f})")
