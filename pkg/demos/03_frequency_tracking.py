"""
Heavy hitters across sites
==========================

Items arrive with Zipf(1.1) popularity.  The frequency tracker keeps, at the
coordinator, an estimate of every item's count within eps * n.  Sites hold
a few sampled counters each and report them with a small probability.
"""
import numpy as np

from disttrack import FreqTracking, run_simulation
from disttrack.workloads import zipf_items

k, eps, N = 8, 0.05, 500_000
w = zipf_items(N, k, alpha=1.1, U=100_000, seed=4)
top = w.top_items(5)
probes = [N // 10 - 1, N // 2 - 1, N - 1]

res = run_simulation(FreqTracking(eps), w, probes, seed=4, queries=top)
print(f"messages {res.stats.messages}, words {res.stats.words}, peak site words {max(s.peak_words for s in res.sites)}")
print("   t     item     true   estimate   |err|/n")
for r in res.records:
    print(f"{r.t + 1:7d} {r.query:6d} {r.truth:8.0f} {r.estimate:10.1f} {r.abs_err / (r.t + 1):9.4f}")

# Each round (between broadcasts of the running total) has its own report
# probability; the final answer sums the per-round estimates.
ps = [rnd.p for rnd in res.coordinator.rounds]
print(f"\n{len(ps)} rounds, report probability went from {ps[0]} to {ps[-1]}")

# The site's memory stays near 2 p nbar / k counters per round.
slack = [peak - 2 * p * cap for s in res.sites for (_, _, peak, p, cap) in s.vsite_peaks if cap < 2**40]
print(f"peak words minus 2 p nbar / k: median {np.median(slack):.0f}, 95th percentile {np.percentile(slack, 95):.0f}")
