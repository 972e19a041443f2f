"""
The mergeable rank summary
==========================

A summary is a binary counter of sorted buffers of s keys.  Two buffers of
the same level merge by sorting their union and keeping every other key,
starting at a random offset 0 or 1, which doubles the weight.  Each merge is
unbiased for every rank query, so the whole summary is too.
"""
import itertools
from fractions import Fraction

import numpy as np

from disttrack.summary import ExactSummary, MergeableSummary, merge_subsample

print("merge [1, 3] with [2, 4]:", merge_subsample([1, 3], [2, 4], 0), "or", merge_subsample([1, 3], [2, 4], 1))

m, eps = 5000, 1 / 8
keys = np.random.default_rng(1).permutation(10**6)[:m]
summ = MergeableSummary(eps, seed=3)
summ.insert_many(keys)
print(f"\n{m} keys, eps {eps}: buffer size {summ.s}, {summ.entries()} entries kept ({summ.words()} words)")
exact = ExactSummary()
exact.insert_many(keys)
ex, approx = exact.finalize(), summ.finalize()
xs = np.sort(keys)[[m // 10, m // 2, 9 * m // 10]]
print("true ranks  ", ex.rank(xs))
print("summary     ", approx.rank(xs))


# Averaging over every possible choice of offsets gives the exact rank.
class Fixed(MergeableSummary):
    def __init__(self, bits):
        super().__init__(1.0, buffer_size=1)
        self.bits = iter(bits)

    def merge_offsets(self, level, first, npairs):
        return np.array([next(self.bits) for _ in range(npairs)])


small = [5, 1, 7, 3, 8, 2, 6, 4]
x = 6
total = Fraction(0)
count = 0
for bits in itertools.product((0, 1), repeat=7):  # 8 keys at s = 1 merge 7 times
    s = Fixed(bits)
    s.insert_many(small)
    total += int(s.finalize().rank([x])[0])
    count += 1
print(f"\naverage rank of {x} over all {count} offset choices: {total / count} (true {sum(k < x for k in small)})")
