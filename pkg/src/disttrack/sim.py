"""Discrete-event engine for the coordinator / k-sites tracking model.

Arrivals are fed to site handlers one global time step at a time.  Every
message a handler returns is delivered immediately (FIFO) and handlers are
re-run until the system is quiescent, so communication takes no time
relative to the arrival stream.  Every delivered message is logged and
charged to :class:`CommStats`.

Sites may declare a number of upcoming arrivals during which they are
guaranteed to stay silent (:meth:`Site.quiet_for`).  The engine then hands
those arrivals over in bulk through :meth:`Site.absorb` instead of calling
:meth:`Site.on_arrival` for each of them.  Because sites draw their
randomness as countdowns, the bulk path and the per-arrival path consume the
same random numbers and produce identical message logs.
"""
from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

COORDINATOR = -1


class ProtocolError(RuntimeError):
    """A protocol broke a rule of the communication model."""


class Message(NamedTuple):
    src: int
    dst: int
    kind: str
    payload: tuple

    @property
    def words(self) -> int:
        return len(self.payload)


def endpoint_name(e: int) -> str:
    return "C" if e == COORDINATOR else f"S{e}"


def endpoint_rng(seed: int, endpoint: int) -> np.random.Generator:
    """Independent generator for one endpoint, derived from the master seed."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(endpoint + 1,))
    return np.random.default_rng(ss)


class Gaps:
    """Stream of Geometric(p) gaps: arrivals up to and including the next success.

    Draws are buffered; changing ``p`` discards the buffer.  ``p == 1`` never
    touches the generator and ``p == 0`` yields an effectively infinite gap.
    """

    _BATCH = 32

    def __init__(self, rng: np.random.Generator, p: float):
        self.rng = rng
        self.set_p(p)

    def set_p(self, p: float) -> None:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability out of range: {p}")
        self.p = p
        self._buf: list[int] = []

    def next(self) -> int:
        p = self.p
        if p >= 1.0:
            return 1
        if p <= 0.0:
            return 1 << 62
        if not self._buf:
            self._buf = self.rng.geometric(p, self._BATCH).tolist()
            self._buf.reverse()
        return self._buf.pop()


def mix64(*parts) -> np.ndarray:
    """splitmix64-style hash of the given integer(s) / integer arrays."""
    with np.errstate(over="ignore"):
        h = np.zeros(np.broadcast(*[np.asarray(p) for p in parts]).shape, dtype=np.uint64)
        for part in parts:
            z = h ^ (np.asarray(part).astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15))
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            h = z ^ (z >> np.uint64(31))
    return h


class CommStats:
    """Message and word counters, in total and per site.

    "Up" is site to coordinator, "down" is coordinator to site.
    """

    def __init__(self, k: int):
        self.k = k
        self.site_messages_up = [0] * k
        self.site_messages_down = [0] * k
        self.site_words_up = [0] * k
        self.site_words_down = [0] * k
        self.messages_up = 0
        self.messages_down = 0
        self.words_up = 0
        self.words_down = 0

    def record(self, msg: Message) -> None:
        w = len(msg.payload)
        if msg.dst == COORDINATOR:
            self.messages_up += 1
            self.words_up += w
            self.site_messages_up[msg.src] += 1
            self.site_words_up[msg.src] += w
        else:
            self.messages_down += 1
            self.words_down += w
            self.site_messages_down[msg.dst] += 1
            self.site_words_down[msg.dst] += w

    @property
    def messages(self) -> int:
        return self.messages_up + self.messages_down

    @property
    def words(self) -> int:
        return self.words_up + self.words_down

    def snapshot(self) -> tuple[int, int, int, int]:
        return (self.messages_up, self.messages_down, self.words_up, self.words_down)

    def consistent(self) -> bool:
        return (
            self.messages_up == sum(self.site_messages_up)
            and self.messages_down == sum(self.site_messages_down)
            and self.words_up == sum(self.site_words_up)
            and self.words_down == sum(self.site_words_down)
        )

    def __eq__(self, other):
        if not isinstance(other, CommStats):
            return NotImplemented
        return vars(self) == vars(other)

    def __repr__(self):
        return "CommStats(msgs_up=%d, msgs_down=%d, words_up=%d, words_down=%d)" % self.snapshot()


def charge_broadcast(stats: CommStats, words_per_msg: int, k: int) -> CommStats:
    """Charge one coordinator broadcast: k messages, one per site."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k != stats.k:
        raise ValueError("broadcast fan-out must equal the number of sites")
    for s in range(k):
        stats.record(Message(COORDINATOR, s, "BROADCAST", (0,) * words_per_msg))
    return stats


def broadcast(k: int, kind: str, payload: tuple) -> list[Message]:
    return [Message(COORDINATOR, s, kind, payload) for s in range(k)]


class Site:
    """Base class for the per-site half of a protocol."""

    index: int
    peak_words: int = 0

    def quiet_for(self) -> int:
        """Number of upcoming arrivals that will certainly produce no message."""
        return 0

    def absorb(self, n: int, keys) -> None:
        """Apply ``n`` silent arrivals (``keys`` is None for keyless workloads)."""
        raise NotImplementedError

    def on_arrival(self, key) -> list[Message]:
        raise NotImplementedError

    def on_message(self, msg: Message) -> list[Message]:
        return []


class Coordinator:
    def on_message(self, msg: Message) -> list[Message]:
        raise NotImplementedError

    def answer(self, query):
        raise NotImplementedError


@dataclass
class ExperimentRecord:
    """One (probe, query) row."""

    t: int
    query: Any
    truth: float
    estimate: float
    msgs_up: int
    msgs_down: int
    words_up: int
    words_down: int
    peak_site_words: int

    @property
    def abs_err(self) -> float:
        return abs(self.estimate - self.truth)

    @property
    def rel_err(self) -> float:
        return self.abs_err / self.truth if self.truth else float("inf") if self.abs_err else 0.0


@dataclass
class SimResult:
    records: list[ExperimentRecord]
    stats: CommStats
    log: list[Message] | None
    coordinator: Coordinator = field(repr=False)
    sites: list[Site] = field(repr=False)

    def peak_site_words(self) -> int:
        return max((s.peak_words for s in self.sites), default=0)


def _check_up(msg: Message, src: int) -> None:
    if msg.src != src or msg.dst != COORDINATOR:
        raise ProtocolError(f"site {src} emitted {msg}; sites may only talk to the coordinator as themselves")
    if len(msg.payload) < 1:
        raise ProtocolError(f"empty message {msg}")


def _check_down(msg: Message, k: int) -> None:
    if msg.src != COORDINATOR or not 0 <= msg.dst < k:
        raise ProtocolError(f"coordinator emitted {msg}")
    if len(msg.payload) < 1:
        raise ProtocolError(f"empty message {msg}")


def run_simulation(
    protocol,
    workload,
    probes: Sequence[int] = (),
    seed: int = 0,
    queries=None,
    *,
    fast: bool = True,
    keep_log: bool = True,
) -> SimResult:
    """Run ``protocol`` over ``workload`` and answer queries at ``probes``.

    ``probes`` are global arrival indices; probe ``t`` is taken after arrival
    ``t`` and its cascade have been processed.  ``queries`` is passed to
    ``workload.resolve_queries`` to obtain the concrete query values at each
    probe (items for frequency, keys for rank, nothing for count).
    """
    probes = [int(t) for t in probes]
    if any(b < a for a, b in zip(probes, probes[1:])):
        raise ValueError("probes must be sorted ascending")
    if probes and (probes[0] < 0 or probes[-1] >= workload.N):
        raise ValueError("probe outside the arrival range")

    check = getattr(protocol, "check_workload", None)
    if check is not None:
        check(workload)
    k = workload.k
    coord, sites = protocol.build(k, seed)
    stats = CommStats(k)
    log: list[Message] | None = [] if keep_log else None
    positions = workload.positions()
    keys = workload.keys
    counts = [len(p) for p in positions]
    done = [0] * k
    version = [0] * k
    heap: list = []
    problem = protocol.problem
    sync_on_probe = getattr(protocol, "tracks_memory", False)

    def schedule(s: int) -> None:
        version[s] += 1
        idx = done[s] + (sites[s].quiet_for() if fast else 0)
        if idx < counts[s]:
            heapq.heappush(heap, (int(positions[s][idx]), version[s], s))

    def sync(s: int, t: int) -> None:
        # hand site s every arrival with global index < t
        pos = positions[s]
        j = done[s]
        if j >= counts[s] or pos[j] >= t:
            return
        hi = int(np.searchsorted(pos, t, side="left"))
        sites[s].absorb(hi - j, None if keys is None else keys[pos[j:hi]])
        done[s] = hi

    def deliver(out: list[Message], t: int, touched: set) -> None:
        queue = deque(out)
        while queue:
            m = queue.popleft()
            stats.record(m)
            if log is not None:
                log.append(m)
            if m.dst == COORDINATOR:
                replies = coord.on_message(m)
                for r in replies:
                    _check_down(r, k)
            else:
                s = m.dst
                sync(s, t)
                replies = sites[s].on_message(m)
                for r in replies:
                    _check_up(r, s)
                touched.add(s)
            queue.extend(replies)

    for s in range(k):
        schedule(s)

    records: list[ExperimentRecord] = []
    pi = 0
    inf = workload.N + 1
    while True:
        while heap and heap[0][1] != version[heap[0][2]]:
            heapq.heappop(heap)
        t_ev = heap[0][0] if heap else inf
        if pi < len(probes) and probes[pi] < t_ev:
            t = probes[pi]
            pi += 1
            if sync_on_probe:
                for s in range(k):
                    sync(s, t + 1)
            qs = workload.resolve_queries(problem, t, queries)
            est = coord.answer(None if problem == "count" else qs)
            tru = workload.truth(problem, t, qs)
            snap = stats.snapshot()
            peak = max((st.peak_words for st in sites), default=0)
            if problem == "count":
                records.append(ExperimentRecord(t, None, float(tru), float(est), *snap, peak))
            else:
                for q, tr, e in zip(qs, tru, est):
                    records.append(ExperimentRecord(t, int(q), float(tr), float(e), *snap, peak))
            continue
        if t_ev >= inf:
            break
        _, _, s = heapq.heappop(heap)
        sync(s, t_ev)
        done[s] += 1
        out = sites[s].on_arrival(None if keys is None else keys[t_ev])
        for m in out:
            _check_up(m, s)
        touched = {s}
        deliver(out, t_ev, touched)
        for u in touched:
            schedule(u)

    # bring every site up to the end of the stream
    for s in range(k):
        sync(s, workload.N)
    finish = getattr(protocol, "finish", None)
    if finish is not None:
        finish(coord, sites)
    return SimResult(records, stats, log, coord, sites)


def recount(log: Sequence[Message], k: int) -> CommStats:
    """Rebuild communication statistics from a message log."""
    stats = CommStats(k)
    for m in log:
        stats.record(m)
    return stats


def write_log_csv(log: Sequence[Message], fh, run_id=0, header: bool = True) -> None:
    w = csv.writer(fh)
    if header:
        w.writerow(["run_id", "seq", "from", "to", "kind", "words"])
    for seq, m in enumerate(log):
        w.writerow([run_id, seq, endpoint_name(m.src), endpoint_name(m.dst), m.kind, len(m.payload)])
