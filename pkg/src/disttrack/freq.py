"""Randomized frequency (heavy hitter) tracking.

Every site keeps a sampled counter list.  A counter for an item is created
with probability ``p`` when a copy arrives and no counter exists; existing
counters count every copy and are reported with probability ``p``.
Independently, every arrival is forwarded as a plain sample with
probability ``p``.  The coordinator combines the last reported counter
``cbar`` and the number ``d`` of plain samples into an unbiased estimate.

Time is cut into rounds by the nbar broadcasts of the count tracker.  Each
round restarts all sites from scratch with the round's ``p``.  A site that has
taken ``nbar/k`` elements in a round starts a fresh *virtual site*, so that a
site never holds more than about ``p * nbar / k`` counters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .count import DEFAULT_CP, DOUBLING_REPORT, NBAR_BROADCAST, NbarTracker, report_probability
from .sim import COORDINATOR, Coordinator, Gaps, Message, Site, broadcast, endpoint_rng

FREQ_REPORT = "FREQ_REPORT"
SAMPLE = "SAMPLE"
SPLIT_NOTIFY = "SPLIT_NOTIFY"

# n, next_double, seen, generation, round, p, two countdowns
_SITE_STATE_WORDS = 8


def estimate_fij_biased(cbar, p: float) -> float:
    """Tempting but biased estimate: zero when no counter was reported."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if cbar is None:
        return 0.0
    return cbar - 2 + 2.0 / p


def estimate_fij_final(cbar, d: int, p: float) -> float:
    """Unbiased estimate of one site's frequency of one item.

    Uses the counter when one exists and minus the scaled plain-sample count
    otherwise.
    """
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    if d < 0:
        raise ValueError("d must be >= 0")
    if cbar is None:
        return -d / p
    return cbar - 2 + 2.0 / p


def capacity(nbar: int, k: int) -> int:
    """Elements one virtual site takes in a round (unbounded before the first broadcast)."""
    if nbar <= 0:
        return 1 << 62
    return max(1, math.ceil(nbar / k))


def sample_counter_process(f: int, p: float, trials: int, rng: np.random.Generator):
    """Monte-Carlo draws of ``(cbar, d)`` for ``f`` copies of one item at one site.

    ``cbar`` is 0 when no counter exists.  Mirrors :meth:`FreqSite.on_arrival`:
    the counter stream and the plain-sample stream are independent
    Bernoulli(p) sequences.
    """
    hits = rng.random((trials, f)) < p
    any_hit = hits.any(axis=1)
    first = np.argmax(hits, axis=1)
    last = f - 1 - np.argmax(hits[:, ::-1], axis=1)
    cbar = np.where(any_hit, last - first + 1, 0)
    d = rng.binomial(f, p, size=trials)
    return cbar, d


class FreqSite(Site):
    def __init__(self, index: int, k: int, eps: float, c_p: float, rng: np.random.Generator):
        self.index = index
        self.k = k
        self.eps = eps
        self.c_p = c_p
        self.rng = rng
        self.n = 0
        self.next_double = 1
        self.round = 0
        self.p = 1.0
        self.cap = capacity(0, k)
        self.gen = 0
        self.seen = 0
        self.counters: dict[int, int] = {}
        self._report_gaps = Gaps(rng, 1.0)
        self._sample_gaps = Gaps(rng, 1.0)
        self.cd_report = 1
        self.cd_sample = 1
        self.peak_words = _SITE_STATE_WORDS
        # (round, generation, peak words) per virtual site, for space checks
        self.vsite_peaks: list[tuple[int, int, int, float, int]] = []
        self._vpeak = _SITE_STATE_WORDS

    def words(self) -> int:
        return _SITE_STATE_WORDS + 2 * len(self.counters)

    def _close_vsite(self) -> None:
        self.vsite_peaks.append((self.round, self.gen, self._vpeak, self.p, self.cap))
        self._vpeak = _SITE_STATE_WORDS

    def quiet_for(self) -> int:
        return min(self.cd_report, self.cd_sample, self.cap - self.seen + 1, self.next_double - self.n) - 1

    def absorb(self, n: int, keys) -> None:
        self.n += n
        self.seen += n
        self.cd_report -= n
        self.cd_sample -= n
        counters = self.counters
        if counters and n:
            if n == 1:
                j = int(keys[0])
                if j in counters:
                    counters[j] += 1
                return
            tracked = np.fromiter(counters, dtype=np.int64, count=len(counters))
            hit = keys[np.isin(keys, tracked)]
            if hit.size:
                items, cnt = np.unique(hit, return_counts=True)
                for j, c in zip(items.tolist(), cnt.tolist()):
                    counters[j] += c

    def on_arrival(self, key) -> list[Message]:
        key = int(key)
        out = []
        self.n += 1
        if self.seen == self.cap:
            self._close_vsite()
            self.gen += 1
            self.seen = 0
            self.counters.clear()
            out.append(Message(self.index, COORDINATOR, SPLIT_NOTIFY, (self.gen,)))
        self.seen += 1
        counters = self.counters
        self.cd_report -= 1
        if self.cd_report == 0:
            c = counters.get(key, 0) + 1
            counters[key] = c
            out.append(Message(self.index, COORDINATOR, FREQ_REPORT, (key, c)))
            self.cd_report = self._report_gaps.next()
            w = self.words()
            if w > self._vpeak:
                self._vpeak = w
                if w > self.peak_words:
                    self.peak_words = w
        elif key in counters:
            counters[key] += 1
        self.cd_sample -= 1
        if self.cd_sample == 0:
            out.append(Message(self.index, COORDINATOR, SAMPLE, (key,)))
            self.cd_sample = self._sample_gaps.next()
        if self.n == self.next_double:
            out.append(Message(self.index, COORDINATOR, DOUBLING_REPORT, (self.n,)))
            self.next_double *= 2
        return out

    def on_message(self, msg: Message) -> list[Message]:
        if msg.kind == NBAR_BROADCAST:
            self.round_restart(msg.payload[0])
        return []

    def round_restart(self, nbar: int) -> None:
        self._close_vsite()
        self.round += 1
        self.p = report_probability(self.eps, nbar, self.k, self.c_p)
        self.cap = capacity(nbar, self.k)
        self.gen = 0
        self.seen = 0
        self.counters.clear()
        self._report_gaps.set_p(self.p)
        self._sample_gaps.set_p(self.p)
        self.cd_report = self._report_gaps.next()
        self.cd_sample = self._sample_gaps.next()

    def finish(self) -> None:
        self._close_vsite()


class FreqRound:
    """Coordinator state for one round: counters and sample counts per (virtual site, item)."""

    def __init__(self, index: int, p: float, nbar: int):
        self.index = index
        self.p = p
        self.nbar = nbar
        self.cbar: dict[tuple, int] = {}
        self.d: dict[tuple, int] = {}
        self._sum_c: dict[int, int] = {}
        self._present: dict[int, int] = {}
        self._d_absent: dict[int, int] = {}
        self.vsites: set = set()

    def report(self, vsite: tuple, item: int, c: int) -> None:
        key = (vsite, item)
        old = self.cbar.get(key)
        if old is None:
            self._present[item] = self._present.get(item, 0) + 1
            dv = self.d.get(key, 0)
            if dv:
                self._d_absent[item] -= dv
            self._sum_c[item] = self._sum_c.get(item, 0) + c
        else:
            self._sum_c[item] += c - old
        self.cbar[key] = c

    def sample(self, vsite: tuple, item: int) -> None:
        key = (vsite, item)
        self.d[key] = self.d.get(key, 0) + 1
        if key not in self.cbar:
            self._d_absent[item] = self._d_absent.get(item, 0) + 1

    def estimate(self, item: int) -> float:
        p = self.p
        npres = self._present.get(item, 0)
        return self._sum_c.get(item, 0) + npres * (2.0 / p - 2) - self._d_absent.get(item, 0) / p

    def estimate_by_definition(self, item: int) -> float:
        """Same as :meth:`estimate`, summed term by term over virtual sites."""
        vs = {v for (v, j) in self.cbar if j == item} | {v for (v, j) in self.d if j == item}
        return sum(estimate_fij_final(self.cbar.get((v, item)), self.d.get((v, item), 0), self.p) for v in vs)

    def items(self) -> set:
        return set(self._sum_c) | set(self._d_absent)


class FreqCoordinator(Coordinator):
    def __init__(self, k: int, eps: float, c_p: float):
        self.k = k
        self.eps = eps
        self.c_p = c_p
        self.tracker = NbarTracker(k)
        self.gen = [0] * k
        self.rounds: list[FreqRound] = [FreqRound(0, 1.0, 0)]
        self._archived: dict[int, float] = {}

    @property
    def current(self) -> FreqRound:
        return self.rounds[-1]

    def on_message(self, msg: Message) -> list[Message]:
        kind = msg.kind
        s = msg.src
        if kind == FREQ_REPORT:
            vs = (s, self.gen[s])
            self.current.vsites.add(vs)
            self.current.report(vs, msg.payload[0], msg.payload[1])
        elif kind == SAMPLE:
            vs = (s, self.gen[s])
            self.current.vsites.add(vs)
            self.current.sample(vs, msg.payload[0])
        elif kind == SPLIT_NOTIFY:
            self.gen[s] = msg.payload[0]
        elif kind == DOUBLING_REPORT:
            nbar = self.tracker.report(s, msg.payload[0])
            if nbar is not None:
                self.round_restart(nbar)
                return broadcast(self.k, NBAR_BROADCAST, (nbar,))
        return []

    def round_restart(self, nbar: int) -> None:
        old = self.current
        for item in old.items():
            self._archived[item] = self._archived.get(item, 0.0) + old.estimate(item)
        p = report_probability(self.eps, nbar, self.k, self.c_p)
        self.rounds.append(FreqRound(len(self.rounds), p, nbar))
        self.gen = [0] * self.k

    def frequency(self, item: int) -> float:
        item = int(item)
        return self._archived.get(item, 0.0) + self.current.estimate(item)

    def answer(self, query):
        return np.array([self.frequency(j) for j in query], dtype=float)


@dataclass
class FreqTracking:
    eps: float
    c_p: float = DEFAULT_CP
    problem = "frequency"
    tracks_memory = False

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must be in (0, 1)")

    def build(self, k: int, seed: int):
        coord = FreqCoordinator(k, self.eps, self.c_p)
        sites = [FreqSite(i, k, self.eps, self.c_p, endpoint_rng(seed, i)) for i in range(k)]
        return coord, sites

    def finish(self, coord, sites) -> None:
        for s in sites:
            s.finish()
