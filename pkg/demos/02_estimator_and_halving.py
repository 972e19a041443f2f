"""
The site estimator, and why p can be halved mid-stream
======================================================

A site reports its counter with probability p at each arrival.  If the last
report was nbar_i, the coordinator estimates the site's count as

    nbar_i - 1 + 1/p      (0 if the site never reported)

which is unbiased with variance (1 - p)(1 - (1 - p)^n) / p^2.

When the total grows the coordinator broadcasts a smaller p.  A site then
rewrites its last report so that its state is distributed exactly as if it
had always used the new p.  Both facts are checked numerically below.
"""
import numpy as np
from scipy import stats

from disttrack.count import halve_p_adjust, sample_reports, site_count_variance

rng = np.random.default_rng(0)
trials = 200_000

print(" n      p     mean      var   formula")
for n, p in [(10, 0.5), (100, 0.1), (1000, 0.01)]:
    last = sample_reports(n, p, trials, rng)
    est = np.where(last > 0, last - 1 + 1 / p, 0.0)
    print(f"{n:4d} {p:6.2f} {est.mean():8.2f} {est.var():8.1f} {site_count_variance(n, p):8.1f}")

# Halving: keep the old report with probability 1/2, otherwise walk back a
# Geometric(new p) number of arrivals.
n, p = 60, 0.25
adjusted = np.array([halve_p_adjust(v or None, p / 2, rng) or 0 for v in sample_reports(n, p, trials, rng)])
fresh = sample_reports(n, p / 2, trials, rng)
gap_a = np.bincount(n - adjusted, minlength=n + 1)
gap_f = np.bincount(n - fresh, minlength=n + 1)
keep = (gap_a + gap_f) >= 20
table = np.vstack([gap_a[keep], gap_f[keep]])
print(f"\nadjusted vs fresh at p = {p / 2}: chi-square p-value {stats.chi2_contingency(table).pvalue:.3f}")
print("gap  adjusted  fresh")
for g in range(6):
    print(f"{g:3d} {gap_a[g] / trials:9.4f} {gap_f[g] / trials:6.4f}")
