"""Randomized rank tracking.

Rounds come from the same nbar broadcasts as count tracking.  Within a round
each site cuts its stream into chunks of ``nbar/k`` elements.  A chunk is cut
into blocks of ``b = eps * nbar / sqrt(k)`` elements and a dyadic tree is laid
over the blocks.  Every tree node runs a rank summary over the elements below
it, with error parameter ``2**-level / sqrt(h)``; the summary is shipped as
soon as the node is complete.  Independently every element is forwarded with
probability ``1/b``, which covers the unfinished block at the end of a chunk.

In the first rounds, while ``nbar <= sqrt(k)/eps``, blocks would be empty and
every element is simply forwarded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .count import DOUBLING_REPORT, NBAR_BROADCAST, NbarTracker
from .sim import COORDINATOR, Coordinator, Gaps, Message, Site, broadcast, endpoint_rng, mix64
from .summary import SUMMARIES, RankSummary

SUMMARY_SHIP = "SUMMARY_SHIP"
TAIL_SAMPLE = "TAIL_SAMPLE"
CHUNK_OPEN = "CHUNK_OPEN"

# n, next_double, round, chunk count, block fill, countdown, p, chunk seq
_SITE_STATE_WORDS = 8


@dataclass(frozen=True)
class ChunkGeometry:
    """Per-round layout of chunks, blocks and the block tree."""

    eps: float
    nbar: int
    k: int
    c_r: float = 1.0

    @property
    def bootstrap(self) -> bool:
        return self.nbar <= self.c_r * math.sqrt(self.k) / self.eps

    @property
    def b(self) -> int:
        return max(1, math.floor(self.eps * self.nbar / (self.c_r * math.sqrt(self.k))))

    @property
    def cap(self) -> int:
        return max(1, math.ceil(self.nbar / self.k))

    @property
    def blocks(self) -> int:
        return math.ceil(self.cap / self.b)

    @property
    def height(self) -> int:
        return math.ceil(math.log2(self.blocks)) if self.blocks > 1 else 0

    @property
    def p(self) -> float:
        if self.bootstrap:
            return 1.0
        return min(1.0, self.c_r * math.sqrt(self.k) / (self.eps * self.nbar))

    def level_eps(self, level: int) -> float:
        return 2.0**-level / math.sqrt(max(1, self.height))

    def decompose(self, n_prime: int) -> tuple[int, int]:
        """``(q, r)`` with ``n_prime = q * b + r`` and ``r < b``."""
        return divmod(n_prime, self.b)


class AlgoC:
    """Site-side state of one chunk: the active spine of the block tree."""

    def __init__(self, geom: ChunkGeometry, summary_kind: str, seed: int):
        self.geom = geom
        self.kind = SUMMARIES[summary_kind]
        self.seed = seed
        self.count = 0
        self.block = 0
        self.fill = 0
        self.complete = False
        self.nodes: dict[int, object] = {}
        self.shipped_words = 0
        self._open_nodes()

    def _open_nodes(self) -> None:
        g = self.geom
        for level in range(g.height + 1):
            if level not in self.nodes:
                index = self.block >> level
                node_seed = int(mix64(self.seed, level, index))
                self.nodes[level] = self.kind(g.level_eps(level), node_seed)

    def remaining_in_block(self) -> int:
        g = self.geom
        return min(g.b - self.fill, g.cap - self.count)

    def insert_many(self, keys) -> None:
        for node in self.nodes.values():
            node.insert_many(keys)
        self.count += len(keys)
        self.fill += len(keys)

    def words(self) -> int:
        return sum(node.words() for node in self.nodes.values())

    def peak_words_during(self, n: int) -> int:
        """Largest footprint reached while taking the next ``n`` keys one at a time."""
        extra = np.arange(1, n + 1)
        return int(sum(node.words_after(extra) for node in self.nodes.values()).max())

    def _ship(self, level: int) -> tuple:
        summ = self.nodes.pop(level).finalize()
        payload = (level,) + summ.wire()
        self.shipped_words += len(payload)
        return payload

    def complete_block(self) -> list[tuple]:
        """Ship every node that the just-finished block completes."""
        g = self.geom
        done = self.count == g.cap
        out = []
        for level in range(g.height + 1):
            if done or (self.block + 1) % (1 << level) == 0:
                out.append(self._ship(level))
            else:
                break
        self.block += 1
        self.fill = 0
        if done:
            self.complete = True
        else:
            self._open_nodes()
        return out

    def close(self) -> tuple | None:
        """Ship the root at the end of a round; it covers the whole chunk."""
        if self.complete or self.count == 0:
            return None
        self.complete = True
        return self._ship(self.geom.height)


class RankSite(Site):
    def __init__(self, index: int, k: int, eps: float, c_r: float, summary: str, rng: np.random.Generator):
        self.index = index
        self.k = k
        self.eps = eps
        self.c_r = c_r
        self.summary = summary
        self.rng = rng
        self.seed = int(rng.integers(0, 2**63 - 1))
        self.n = 0
        self.next_double = 1
        self.round = 0
        self.geom = ChunkGeometry(eps, 0, k, c_r)
        self.chunk: AlgoC | None = None
        self.chunk_seq = 0
        self.gaps = Gaps(rng, 1.0)
        self.cd = 1
        self.peak_words = _SITE_STATE_WORDS
        # (round, seq, first local index, element count, b, shipped words)
        self.chunks: list[list] = []

    def _words(self) -> int:
        return _SITE_STATE_WORDS + (self.chunk.words() if self.chunk is not None else 0)

    def _note_memory(self) -> None:
        w = self._words()
        if w > self.peak_words:
            self.peak_words = w

    def _needs_open(self) -> bool:
        return self.chunk is None or self.chunk.count == self.geom.cap

    def quiet_for(self) -> int:
        if self.geom.bootstrap or self._needs_open():
            return 0
        return min(self.cd, self.chunk.remaining_in_block(), self.next_double - self.n) - 1

    def absorb(self, n: int, keys) -> None:
        self.n += n
        self.cd -= n
        if self.chunk is not None and n:
            peak = _SITE_STATE_WORDS + self.chunk.peak_words_during(n)
            if peak > self.peak_words:
                self.peak_words = peak
            self.chunk.insert_many(keys)
            self.chunks[-1][3] += n

    def _open(self) -> Message:
        self.chunk_seq += 1
        self.chunk = AlgoC(self.geom, self.summary, int(mix64(self.seed, self.round, self.chunk_seq)))
        self.chunks.append([self.round, self.chunk_seq, self.n - 1, 0, self.geom.b, 0])
        return Message(self.index, COORDINATOR, CHUNK_OPEN, (self.chunk_seq,))

    def on_arrival(self, key) -> list[Message]:
        key = int(key)
        self.n += 1
        out = []
        if self.geom.bootstrap:
            out.append(Message(self.index, COORDINATOR, TAIL_SAMPLE, (key,)))
        else:
            if self._needs_open():
                out.append(self._open())
            chunk = self.chunk
            chunk.insert_many(np.asarray([key], dtype=np.int64))
            self.chunks[-1][3] += 1
            self._note_memory()
            self.cd -= 1
            if self.cd == 0:
                out.append(Message(self.index, COORDINATOR, TAIL_SAMPLE, (key,)))
                self.cd = self.gaps.next()
            if chunk.fill == self.geom.b or chunk.count == self.geom.cap:
                for payload in chunk.complete_block():
                    out.append(Message(self.index, COORDINATOR, SUMMARY_SHIP, payload))
                self.chunks[-1][5] = chunk.shipped_words
                self._note_memory()
        if self.n == self.next_double:
            out.append(Message(self.index, COORDINATOR, DOUBLING_REPORT, (self.n,)))
            self.next_double *= 2
        return out

    def on_message(self, msg: Message) -> list[Message]:
        if msg.kind != NBAR_BROADCAST:
            return []
        out = []
        if self.chunk is not None:
            payload = self.chunk.close()
            if payload is not None:
                out.append(Message(self.index, COORDINATOR, SUMMARY_SHIP, payload))
                self.chunks[-1][5] = self.chunk.shipped_words
        self.chunk = None
        self.round += 1
        self.geom = ChunkGeometry(self.eps, msg.payload[0], self.k, self.c_r)
        self.gaps.set_p(self.geom.p)
        self.cd = self.gaps.next()
        return out


@dataclass
class LiveChunk:
    """Coordinator view of one chunk: maximal complete nodes plus the sampled tail."""

    site: int
    seq: int
    round: int
    geom: ChunkGeometry
    stack: list = field(default_factory=list)
    tail: list = field(default_factory=list)
    complete: bool = False

    def ship(self, level: int, summ: RankSummary) -> None:
        while self.stack and self.stack[-1][0] < level:
            self.stack.pop()
        self.stack.append((level, summ))
        self.tail.clear()
        if level == self.geom.height:
            self.complete = True

    def covered(self) -> int:
        return sum(s.count for _, s in self.stack)

    def rank(self, xs: np.ndarray) -> np.ndarray:
        est = np.zeros(xs.size, dtype=float)
        for _, summ in self.stack:
            est += summ.rank(xs)
        if self.tail:
            tail = np.sort(np.asarray(self.tail, dtype=np.int64))
            est += np.searchsorted(tail, xs, side="left") / self.geom.p
        return est


class RankCoordinator(Coordinator):
    def __init__(self, k: int, eps: float, c_r: float):
        self.k = k
        self.eps = eps
        self.c_r = c_r
        self.tracker = NbarTracker(k)
        self.round = 0
        self.geom = ChunkGeometry(eps, 0, k, c_r)
        self.live: list[LiveChunk | None] = [None] * k
        self.chunks: dict[tuple, LiveChunk] = {}
        self._raw: list[int] = []
        self._pending: list[RankSummary] = []
        self._agg = RankSummary.from_parts([])

    def on_message(self, msg: Message) -> list[Message]:
        kind = msg.kind
        s = msg.src
        if kind == TAIL_SAMPLE:
            if self.geom.bootstrap:
                self._raw.append(msg.payload[0])
            else:
                self.live[s].tail.append(msg.payload[0])
        elif kind == SUMMARY_SHIP:
            chunk = self.live[s]
            chunk.ship(msg.payload[0], RankSummary.from_wire(msg.payload[1:]))
            if chunk.complete:
                self._pending.append(chunk.stack[0][1])
                self.live[s] = None
        elif kind == CHUNK_OPEN:
            chunk = LiveChunk(s, msg.payload[0], self.round, self.geom)
            self.live[s] = chunk
            self.chunks[(self.round, s, msg.payload[0])] = chunk
        elif kind == DOUBLING_REPORT:
            nbar = self.tracker.report(s, msg.payload[0])
            if nbar is not None:
                self.round += 1
                self.geom = ChunkGeometry(self.eps, nbar, self.k, self.c_r)
                return broadcast(self.k, NBAR_BROADCAST, (nbar,))
        return []

    def _aggregate(self) -> RankSummary:
        if self._pending or self._raw:
            raw = RankSummary(np.sort(np.asarray(self._raw, dtype=np.int64)),
                              np.ones(len(self._raw), dtype=np.int64))
            parts = [self._agg, raw] + self._pending
            keys = np.concatenate([p.keys for p in parts])
            weights = np.concatenate([p.weights for p in parts])
            order = np.argsort(keys, kind="stable")
            self._agg = RankSummary(keys[order], weights[order])
            self._pending = []
            self._raw = []
        return self._agg

    def rank(self, xs) -> np.ndarray:
        xs = np.atleast_1d(np.asarray(xs, dtype=np.int64))
        est = self._aggregate().rank(xs).astype(float)
        for chunk in self.live:
            if chunk is not None:
                est += chunk.rank(xs)
        return est

    def total_estimate(self) -> float:
        """Estimated number of elements (rank of +infinity)."""
        return float(self.rank([np.iinfo(np.int64).max])[0])

    def quantile(self, phi: float) -> int:
        """Smallest known key whose estimated rank reaches ``phi`` times the estimated total."""
        agg = self._aggregate()
        cand = [agg.keys]
        for chunk in self.live:
            if chunk is not None:
                cand.extend(s.keys for _, s in chunk.stack)
                cand.append(np.asarray(chunk.tail, dtype=np.int64))
        cand = np.unique(np.concatenate(cand))
        if cand.size == 0:
            raise ValueError("no elements seen yet")
        target = phi * self.total_estimate()
        lo, hi = 0, cand.size - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if self.rank([cand[mid]])[0] >= target:
                hi = mid
            else:
                lo = mid + 1
        return int(cand[lo])

    def answer(self, query):
        return self.rank(query)


@dataclass
class RankTracking:
    eps: float
    c_r: float = 1.0
    summary: str = "mergeable"
    problem = "rank"
    tracks_memory = True

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must be in (0, 1)")
        if self.summary not in SUMMARIES:
            raise ValueError(f"unknown summary {self.summary!r}")

    def build(self, k: int, seed: int):
        coord = RankCoordinator(k, self.eps, self.c_r)
        sites = [RankSite(i, k, self.eps, self.c_r, self.summary, endpoint_rng(seed, i)) for i in range(k)]
        return coord, sites

    def check_workload(self, workload) -> None:
        if workload.keys is None or np.unique(workload.keys).size != workload.N:
            raise ValueError("rank tracking needs distinct keys")


def chunk_meter(result, workload, xs) -> tuple[np.ndarray, np.ndarray]:
    """Per-chunk mean squared rank error over the query keys ``xs``, and the chunk's block size.

    Uses the coordinator's view of every chunk at the end of the run against
    the chunk's true contents.
    """
    xs = np.asarray(xs, dtype=np.int64)
    coord = result.coordinator
    positions = workload.positions()
    mse, bs = [], []
    for site in result.sites:
        for rnd, seq, first, count, b, _ in site.chunks:
            chunk = coord.chunks[(rnd, site.index, seq)]
            keys = np.sort(workload.keys[positions[site.index][first:first + count]])
            truth = np.searchsorted(keys, xs, side="left")
            err = chunk.rank(xs) - truth
            mse.append(float(np.mean(err**2)))
            bs.append(b)
    return np.asarray(mse), np.asarray(bs, dtype=float)
