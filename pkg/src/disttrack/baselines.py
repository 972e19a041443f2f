"""Reference protocols: deterministic count tracking and a distributed bottom-s sample."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import COORDINATOR, Coordinator, Message, Site, broadcast, endpoint_rng

DET_REPORT = "DET_REPORT"
SAMPLE_FWD = "SAMPLE_FWD"
TAU_BROADCAST = "TAU_BROADCAST"

PRIORITY_SPACE = 2**64


def next_det_threshold(last: int, eps: float) -> int:
    """Smallest counter value at which a site reports again."""
    if last == 0:
        return 1
    return max(last + 1, math.ceil((1 + eps) * last - 1e-9))


class DetCountSite(Site):
    def __init__(self, index: int, eps: float):
        self.index = index
        self.eps = eps
        self.n = 0
        self.last_report = 0
        self.threshold = 1
        self.peak_words = 3

    def quiet_for(self) -> int:
        return self.threshold - self.n - 1

    def absorb(self, n: int, keys=None) -> None:
        self.n += n

    def on_arrival(self, key=None) -> list[Message]:
        self.n += 1
        if self.n >= self.threshold:
            self.last_report = self.n
            self.threshold = next_det_threshold(self.n, self.eps)
            return [Message(self.index, COORDINATOR, DET_REPORT, (self.n,))]
        return []


class DetCountCoordinator(Coordinator):
    def __init__(self, k: int):
        self.last = [0] * k
        self.total = 0

    def on_message(self, msg: Message) -> list[Message]:
        if msg.kind == DET_REPORT:
            self.total += msg.payload[0] - self.last[msg.src]
            self.last[msg.src] = msg.payload[0]
        return []

    def estimate(self) -> float:
        return float(self.total)

    def answer(self, query=None) -> float:
        return self.estimate()


@dataclass
class DetCount:
    """Each site reports whenever its counter grew by a factor ``1 + eps``."""

    eps: float
    problem = "count"

    def build(self, k: int, seed: int):
        return DetCountCoordinator(k), [DetCountSite(i, self.eps) for i in range(k)]


def sample_size(eps: float, c: float = 4.0) -> int:
    return math.ceil(c / eps**2)


class PrioritySampleSite(Site):
    """Gives every arrival a uniform 64-bit priority and forwards those below ``tau``.

    Priorities are drawn in blocks ahead of time, so the number of silent
    arrivals before the next forward can be read off the block.
    """

    _BLOCK = 4096

    def __init__(self, index: int, rng: np.random.Generator, record: bool = False):
        self.index = index
        self.rng = rng
        self.tau = PRIORITY_SPACE
        self.n = 0
        self._block = np.empty(0, dtype=np.uint64)
        self._pos = 0
        self.record = record
        self.priorities: list[int] = []
        self.peak_words = 3

    def _ensure(self, upto: int) -> None:
        while self._block.size - self._pos < upto:
            fresh = self.rng.integers(0, PRIORITY_SPACE, size=self._BLOCK, dtype=np.uint64)
            self._block = np.concatenate([self._block[self._pos:], fresh])
            self._pos = 0

    def quiet_for(self) -> int:
        if self.tau >= PRIORITY_SPACE:
            return 0
        tau = np.uint64(self.tau)
        scanned = 0
        while True:
            self._ensure(scanned + self._BLOCK)
            window = self._block[self._pos + scanned:self._pos + scanned + self._BLOCK]
            hit = np.flatnonzero(window < tau)
            if hit.size:
                return scanned + int(hit[0])
            scanned += self._BLOCK

    def absorb(self, n: int, keys=None) -> None:
        self._ensure(n)
        if self.record:
            self.priorities.extend(self._block[self._pos:self._pos + n].tolist())
        self._pos += n
        self.n += n

    def on_arrival(self, key) -> list[Message]:
        self._ensure(1)
        pr = int(self._block[self._pos])
        self._pos += 1
        self.n += 1
        if self.record:
            self.priorities.append(pr)
        if pr < self.tau:
            return [Message(self.index, COORDINATOR, SAMPLE_FWD, (pr, 0 if key is None else int(key)))]
        return []

    def on_message(self, msg: Message) -> list[Message]:
        if msg.kind == TAU_BROADCAST:
            self.tau = msg.payload[0]
        return []


class PrioritySampleCoordinator(Coordinator):
    def __init__(self, k: int, s: int):
        self.k = k
        self.s = s
        self.kept: list[tuple[int, int]] = []
        self._sorted = True
        self.tau = PRIORITY_SPACE

    def _normalize(self) -> None:
        if not self._sorted:
            self.kept.sort()
            del self.kept[self.s:]
            self._sorted = True

    def on_message(self, msg: Message) -> list[Message]:
        if msg.kind != SAMPLE_FWD:
            return []
        self.kept.append((msg.payload[0], msg.payload[1]))
        self._sorted = False
        if len(self.kept) >= 2 * self.s:
            self._normalize()
        if len(self.kept) >= self.s:
            self._normalize()
            kth = self.kept[-1][0]
            if kth < self.tau // 2:
                self.tau = kth
                return broadcast(self.k, TAU_BROADCAST, (kth,))
        return []

    def sample(self) -> list[tuple[int, int]]:
        self._normalize()
        return list(self.kept)

    def _scale(self):
        """Kept keys that carry estimation weight, and their inverse inclusion probability."""
        kept = self.sample()
        if len(kept) < self.s:
            return [key for _, key in kept], 1.0
        thresh = kept[-1][0] / PRIORITY_SPACE
        return [key for _, key in kept[:-1]], 1.0 / thresh

    def count(self) -> float:
        keys, w = self._scale()
        return len(keys) * w

    def frequency(self, item: int) -> float:
        keys, w = self._scale()
        return sum(1 for x in keys if x == item) * w

    def rank(self, xs) -> np.ndarray:
        keys, w = self._scale()
        arr = np.sort(np.asarray(keys, dtype=np.int64))
        return np.searchsorted(arr, np.asarray(xs, dtype=np.int64), side="left") * w

    def answer(self, query):
        return self.count() if query is None else self._answer(query)

    def _answer(self, query):
        raise NotImplementedError


class _FreqAnswer(PrioritySampleCoordinator):
    def _answer(self, query):
        return np.array([self.frequency(j) for j in query], dtype=float)


class _RankAnswer(PrioritySampleCoordinator):
    def _answer(self, query):
        return self.rank(query)


@dataclass
class PrioritySample:
    """Bottom-``s`` priority sample maintained at the coordinator.

    Sites forward an arrival when its priority is below the last broadcast
    threshold; the coordinator rebroadcasts the threshold whenever its
    ``s``-th smallest priority has halved.
    """

    eps: float
    c: float = 4.0
    problem: str = "count"
    record: bool = False

    @property
    def s(self) -> int:
        return sample_size(self.eps, self.c)

    def build(self, k: int, seed: int):
        cls = {"count": PrioritySampleCoordinator, "frequency": _FreqAnswer, "rank": _RankAnswer}[self.problem]
        return cls(k, self.s), [PrioritySampleSite(i, endpoint_rng(seed, i), self.record) for i in range(k)]
