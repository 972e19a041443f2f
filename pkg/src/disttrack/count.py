"""Randomized count tracking.

Each site forwards its counter with probability ``p`` on every increment and
the coordinator estimates the site's count as ``last_reported - 1 + 1/p``.
``p`` is tied to a constant-factor approximation ``nbar`` of the total count,
which the coordinator maintains from doubling reports and broadcasts.  When
``p`` drops, each site rewrites its last report so that its state is
distributed as if it had always run with the new ``p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import COORDINATOR, Coordinator, Gaps, Message, Site, broadcast, endpoint_rng

COUNT_REPORT = "COUNT_REPORT"
DOUBLING_REPORT = "DOUBLING_REPORT"
NBAR_BROADCAST = "NBAR_BROADCAST"
P_ADJUST_REPORT = "P_ADJUST_REPORT"

DEFAULT_CP = 4.0


def dyadic_floor(x: float) -> int:
    """Largest power of two strictly smaller than ``x`` (``x > 1``)."""
    if x <= 1:
        raise ValueError("dyadic_floor needs x > 1")
    e = max(0, math.ceil(math.log2(x)) - 1)
    while 2 ** (e + 1) < x:
        e += 1
    while e > 0 and 2**e >= x:
        e -= 1
    return 2**e


def report_probability(eps: float, nbar: float, k: int, c_p: float = DEFAULT_CP) -> float:
    """Per-arrival report probability for a round whose broadcast value is ``nbar``.

    1 while ``nbar <= c_p * sqrt(k) / eps``, otherwise
    ``1 / dyadic_floor(eps * nbar / (c_p * sqrt(k)))``.
    """
    x = eps * nbar / (c_p * math.sqrt(k))
    if x <= 1:
        return 1.0
    return 1.0 / dyadic_floor(x)


def estimate_site_count(nbar_i, p: float) -> float:
    """Unbiased estimate of one site's counter from its last report."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if nbar_i is None:
        return 0.0
    return nbar_i - 1 + 1.0 / p


def site_count_variance(n_i: int, p: float) -> float:
    """Exact variance of :func:`estimate_site_count` after ``n_i`` increments."""
    return (1 - p) * (1 - (1 - p) ** n_i) / p**2


def halve_p_adjust(nbar_i, new_p: float, rng: np.random.Generator):
    """Rewrite a last report when the report probability halves to ``new_p``.

    With probability 1/2 the old report survives the thinning.  Otherwise the
    report at ``nbar_i`` is dropped and earlier increments are walked back one
    by one, each being a report under ``new_p`` with probability ``new_p``.
    Returns the new value, or None when no report survives.
    """
    if nbar_i is None:
        return None
    if rng.random() < 0.5:
        return nbar_i
    v = nbar_i - int(rng.geometric(new_p))
    return v if v > 0 else None


def sample_reports(n_i: int, p: float, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Last reported counter value after ``n_i`` increments, for many independent sites.

    Vectorized version of the site's report process: forward geometric gaps,
    drawn a block at a time per trial.  Returns an int array with 0 where no
    report was made.
    """
    last = np.zeros(trials, dtype=np.int64)
    if p <= 0 or n_i <= 0:
        return last
    if p >= 1:
        last[:] = n_i
        return last
    # Geometric(p) by inversion; about twice as fast as Generator.geometric
    scale = 1.0 / math.log1p(-p)
    block = int(n_i * p * 1.2) + 8
    rows = max(1, 2_000_000 // block)
    for lo in range(0, trials, rows):
        hi = min(trials, lo + rows)
        pos = np.zeros(hi - lo, dtype=np.int64)
        idx = np.arange(hi - lo)
        while idx.size:
            gaps = np.floor(np.log(1.0 - rng.random((idx.size, block))) * scale).astype(np.int64) + 1
            steps = np.cumsum(gaps, axis=1) + pos[idx, None]
            inside = np.count_nonzero(steps <= n_i, axis=1)
            hit = inside > 0
            last[lo + idx[hit]] = steps[hit, inside[hit] - 1]
            pos[idx] = steps[:, -1]
            idx = idx[inside == block]
    return last


class NbarTracker:
    """Coordinator side of the constant-factor tracker of the total count.

    Sites report their counter each time it reaches a power of two.  The
    coordinator sums the latest reports into ``n_prime`` and broadcasts it as
    the new ``nbar`` once it has at least doubled.
    """

    def __init__(self, k: int):
        self.k = k
        self.ndouble = [0] * k
        self.n_prime = 0
        self.nbar = 0
        self.broadcasts = 0

    def report(self, site: int, value: int):
        self.n_prime += value - self.ndouble[site]
        self.ndouble[site] = value
        if self.n_prime >= 2 * self.nbar:
            self.nbar = self.n_prime
            self.broadcasts += 1
            return self.nbar
        return None


class CountSite(Site):
    __slots__ = ("index", "k", "eps", "c_p", "rng", "n", "nbar_i", "next_double", "p", "gaps", "cd",
                 "peak_words")

    def __init__(self, index: int, k: int, eps: float, c_p: float, rng: np.random.Generator, p: float = 1.0):
        self.index = index
        self.k = k
        self.eps = eps
        self.c_p = c_p
        self.rng = rng
        self.n = 0
        self.nbar_i = None
        self.next_double = 1
        self.p = p
        self.gaps = Gaps(rng, p)
        self.cd = self.gaps.next()
        # n, nbar_i, next_double, p
        self.peak_words = 4

    def quiet_for(self) -> int:
        return min(self.cd, self.next_double - self.n) - 1

    def absorb(self, n: int, keys=None) -> None:
        self.n += n
        self.cd -= n

    def on_arrival(self, key=None) -> list[Message]:
        self.n += 1
        self.cd -= 1
        out = []
        if self.cd == 0:
            self.nbar_i = self.n
            out.append(Message(self.index, COORDINATOR, COUNT_REPORT, (self.n,)))
            self.cd = self.gaps.next()
        if self.n == self.next_double:
            out.append(Message(self.index, COORDINATOR, DOUBLING_REPORT, (self.n,)))
            self.next_double *= 2
        return out

    def on_message(self, msg: Message) -> list[Message]:
        if msg.kind != NBAR_BROADCAST:
            return []
        new_p = report_probability(self.eps, msg.payload[0], self.k, self.c_p)
        if new_p >= self.p:
            return []
        out = []
        if self.nbar_i is not None:
            p = self.p
            while p > new_p:
                p /= 2
                self.nbar_i = halve_p_adjust(self.nbar_i, p, self.rng)
            out.append(Message(self.index, COORDINATOR, P_ADJUST_REPORT, (self.nbar_i or 0,)))
        self.p = new_p
        self.gaps.set_p(new_p)
        self.cd = self.gaps.next()
        return out


class CountCoordinator(Coordinator):
    def __init__(self, k: int, eps: float, c_p: float):
        self.k = k
        self.eps = eps
        self.c_p = c_p
        self.nbar_i = [None] * k
        self.tracker = NbarTracker(k)
        self.p = 1.0
        self._sum = 0
        self._present = 0

    @property
    def nbar(self) -> int:
        return self.tracker.nbar

    def _set(self, site: int, value) -> None:
        old = self.nbar_i[site]
        if old is not None:
            self._sum -= old
            self._present -= 1
        if value:
            self._sum += value
            self._present += 1
            self.nbar_i[site] = value
        else:
            self.nbar_i[site] = None

    def on_message(self, msg: Message) -> list[Message]:
        kind = msg.kind
        if kind == COUNT_REPORT or kind == P_ADJUST_REPORT:
            self._set(msg.src, msg.payload[0])
        elif kind == DOUBLING_REPORT:
            nbar = self.tracker.report(msg.src, msg.payload[0])
            if nbar is not None:
                self.p = min(self.p, report_probability(self.eps, nbar, self.k, self.c_p))
                return broadcast(self.k, NBAR_BROADCAST, (nbar,))
        return []

    def site_estimates(self) -> list[float]:
        return [estimate_site_count(v, self.p) for v in self.nbar_i]

    def estimate(self) -> float:
        return self._sum - self._present + self._present / self.p

    def answer(self, query=None) -> float:
        return self.estimate()


@dataclass
class CountTracking:
    """Randomized count tracker; ``build`` creates one coordinator and k sites."""

    eps: float
    c_p: float = DEFAULT_CP
    problem = "count"

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must be in (0, 1)")

    def build(self, k: int, seed: int):
        coord = CountCoordinator(k, self.eps, self.c_p)
        sites = [CountSite(i, k, self.eps, self.c_p, endpoint_rng(seed, i)) for i in range(k)]
        return coord, sites


@dataclass
class FixedPCount:
    """Count tracking with a constant report probability and no nbar tracking."""

    p: float
    problem = "count"

    def build(self, k: int, seed: int):
        coord = _FixedPCoordinator(k, self.p)
        sites = []
        for i in range(k):
            s = CountSite(i, k, 0.5, 1.0, endpoint_rng(seed, i), p=self.p)
            s.next_double = 1 << 62
            sites.append(s)
        return coord, sites


class _FixedPCoordinator(CountCoordinator):
    def __init__(self, k: int, p: float):
        super().__init__(k, 0.5, 1.0)
        self.p = p

    def estimate(self) -> float:
        if self.p == 0:
            return 0.0
        return super().estimate()


def median_boost(estimates) -> float:
    """Median of an odd number of independent copy estimates."""
    estimates = list(estimates)
    if len(estimates) % 2 == 0:
        raise ValueError("median boosting needs an odd number of copies")
    return float(np.median(estimates))


def copy_seed(seed: int, copy: int) -> int:
    """Seed of boosting copy ``copy``; copy 0 keeps the run's own seed."""
    if copy == 0:
        return seed
    return int(np.random.SeedSequence([seed, copy]).generate_state(1, np.uint64)[0])
