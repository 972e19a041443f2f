"""Seeded arrival sequences with exact ground truth.

A workload is a fixed sequence of ``N`` arrivals ``(site, key)``.  Ground
truth (count, item frequencies, ranks) at any arrival index is answered from
precomputed per-site and per-item position arrays.
"""
from __future__ import annotations

import math
from functools import cached_property

import numpy as np


class Workload:
    """Arrival sequence over ``k`` sites.

    ``sites[t]`` is the site receiving arrival ``t`` and ``keys[t]`` its key
    (None for the count problem, where elements carry no identity).
    """

    def __init__(self, kind: str, k: int, sites: np.ndarray, keys: np.ndarray | None = None, **meta):
        if k < 1:
            raise ValueError("k must be >= 1")
        sites = np.asarray(sites, dtype=np.int64)
        if sites.size and (sites.min() < 0 or sites.max() >= k):
            raise ValueError("site index out of range")
        if keys is not None:
            keys = np.asarray(keys, dtype=np.int64)
            if keys.shape != sites.shape:
                raise ValueError("keys and sites must have the same length")
        self.kind = kind
        self.k = k
        self.sites = sites
        self.keys = keys
        self.meta = meta
        self._prefix_t = -1
        self._prefix_sorted = np.empty(0, dtype=np.int64)

    @property
    def N(self) -> int:
        return int(self.sites.size)

    def __len__(self):
        return self.N

    def __iter__(self):
        keys = self.keys
        for t, s in enumerate(self.sites.tolist()):
            yield s, (None if keys is None else int(keys[t]))

    def positions(self) -> list[np.ndarray]:
        """Global arrival indices of each site, ascending."""
        return self._positions

    @cached_property
    def _positions(self) -> list[np.ndarray]:
        order = np.argsort(self.sites, kind="stable")
        bounds = np.searchsorted(self.sites[order], np.arange(self.k + 1))
        return [order[bounds[s]:bounds[s + 1]] for s in range(self.k)]

    def site_counts(self, t: int | None = None) -> np.ndarray:
        """Per-site counts after arrival ``t`` (all arrivals when None)."""
        upto = self.N if t is None else t + 1
        return np.bincount(self.sites[:upto], minlength=self.k)

    # ground truth ------------------------------------------------------

    @cached_property
    def _item_positions(self) -> dict[int, np.ndarray]:
        order = np.argsort(self.keys, kind="stable")
        sk = self.keys[order]
        items, starts = np.unique(sk, return_index=True)
        ends = np.append(starts[1:], sk.size)
        return {int(j): order[a:b] for j, a, b in zip(items, starts, ends)}

    def frequency(self, item: int, t: int) -> int:
        pos = self._item_positions.get(int(item))
        if pos is None:
            return 0
        return int(np.searchsorted(pos, t, side="right"))

    def top_items(self, m: int) -> np.ndarray:
        """The ``m`` most frequent items over the whole stream (ties by id)."""
        items, counts = np.unique(self.keys, return_counts=True)
        order = np.lexsort((items, -counts))
        return items[order[:m]]

    def sorted_prefix(self, t: int) -> np.ndarray:
        """Sorted keys of arrivals ``0..t``; cached for non-decreasing ``t``."""
        if t < self._prefix_t:
            self._prefix_t = -1
            self._prefix_sorted = np.empty(0, dtype=np.int64)
        if t > self._prefix_t:
            new = np.sort(self.keys[self._prefix_t + 1:t + 1])
            merged = np.concatenate([self._prefix_sorted, new])
            merged.sort(kind="stable")
            self._prefix_sorted = merged
            self._prefix_t = t
        return self._prefix_sorted

    def rank(self, xs, t: int) -> np.ndarray:
        """Number of keys among arrivals ``0..t`` strictly smaller than each x."""
        return np.searchsorted(self.sorted_prefix(t), np.asarray(xs, dtype=np.int64), side="left")

    def quantile_keys(self, phis, t: int) -> np.ndarray:
        """Key of rank ``floor(phi * n)`` among arrivals ``0..t``."""
        pref = self.sorted_prefix(t)
        idx = np.minimum((np.asarray(phis, dtype=float) * pref.size).astype(np.int64), pref.size - 1)
        return pref[idx]

    def resolve_queries(self, problem: str, t: int, queries):
        if problem == "count":
            return [None]
        if problem == "frequency":
            return np.asarray(queries, dtype=np.int64)
        if problem == "rank":
            return self.quantile_keys(queries, t)
        raise ValueError(f"unknown problem {problem!r}")

    def truth(self, problem: str, t: int, queries=None):
        if problem == "count":
            return t + 1
        if problem == "frequency":
            return np.array([self.frequency(j, t) for j in queries], dtype=np.int64)
        if problem == "rank":
            return self.rank(queries, t)
        raise ValueError(f"unknown problem {problem!r}")


def _rng(seed):
    return np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(0xA11,)))


def round_robin(N: int, k: int, keys=None) -> Workload:
    """Arrival ``t`` goes to site ``t mod k``."""
    return Workload("round_robin", k, np.arange(N, dtype=np.int64) % k, keys)


def one_way_hard(N: int, k: int, seed: int = 0, case: str | None = None, site: int | None = None) -> Workload:
    """With probability 1/2 everything goes to one random site, else round-robin."""
    rng = _rng(seed)
    coin = rng.random() < 0.5
    pick = int(rng.integers(k))
    if case is None:
        case = "a" if coin else "b"
    if case == "a":
        s = pick if site is None else site
        return Workload("one_way_hard", k, np.full(N, s, dtype=np.int64), case="a", site=s)
    if case == "b":
        return Workload("one_way_hard", k, np.arange(N, dtype=np.int64) % k, case="b")
    raise ValueError("case must be 'a' or 'b'")


def two_way_hard(k: int, rounds: int, subrounds: int, seed: int = 0, s_values=None) -> Workload:
    """Rounds of subrounds; each subround sends ``2**i`` elements to ``s`` random sites.

    ``s`` is ``k/2 - sqrt(k)`` or ``k/2 + sqrt(k)`` with equal probability.
    ``s_values`` forces the sequence of ``s`` (one value per subround).
    """
    if k < 16:
        raise ValueError("two_way_hard needs k >= 16")
    root = math.sqrt(k)
    r = int(round(root))
    rng = _rng(seed)
    low, high = k // 2 - r, k // 2 + r
    chunks = []
    chosen = []
    j = 0
    for i in range(rounds):
        for _ in range(subrounds):
            if s_values is not None:
                s = int(s_values[j])
            else:
                s = high if rng.random() < 0.5 else low
            j += 1
            chosen.append(s)
            picked = rng.choice(k, size=s, replace=False)
            chunks.append(np.repeat(picked, 2**i))
    sites = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return Workload("two_way_hard", k, sites, rounds=rounds, subrounds=subrounds, s=chosen,
                    sqrt_k=r, sqrt_k_rounded=(r != root))


def zipf_probabilities(alpha: float, U: int) -> np.ndarray:
    w = np.arange(1, U + 1, dtype=float) ** -alpha
    return w / w.sum()


def zipf_items(N: int, k: int, alpha: float, U: int, seed: int = 0) -> Workload:
    """I.i.d. Zipf(alpha) item ids over ``0..U-1`` (item 0 most frequent), round-robin sites."""
    if alpha <= 0 or U < 1:
        raise ValueError("need alpha > 0 and U >= 1")
    cdf = np.cumsum(zipf_probabilities(alpha, U))
    cdf[-1] = 1.0
    items = np.searchsorted(cdf, _rng(seed).random(N), side="right")
    return Workload("zipf", k, np.arange(N, dtype=np.int64) % k, np.minimum(items, U - 1), alpha=alpha, U=U)


def random_keys(N: int, k: int, seed: int = 0) -> Workload:
    """Distinct random 63-bit keys, round-robin sites."""
    rng = _rng(seed)
    keys = rng.integers(0, 2**63 - 1, size=N, dtype=np.int64)
    while True:
        _, first = np.unique(keys, return_index=True)
        if first.size == N:
            break
        dup = np.ones(N, dtype=bool)
        dup[first] = False
        keys[dup] = rng.integers(0, 2**63 - 1, size=int(dup.sum()), dtype=np.int64)
    return Workload("random_keys", k, np.arange(N, dtype=np.int64) % k, keys)


def check_distinct(workload: Workload) -> None:
    if workload.keys is None or np.unique(workload.keys).size != workload.N:
        raise ValueError("rank workloads need distinct keys")


KINDS = {
    "round_robin": round_robin,
    "one_way_hard": one_way_hard,
    "two_way_hard": two_way_hard,
    "zipf": zipf_items,
    "random_keys": random_keys,
}


def make_workload(kind: str, seed: int = 0, **params) -> Workload:
    """Build a workload from a kind name and keyword parameters."""
    if kind == "round_robin":
        return round_robin(int(params["N"]), int(params["k"]))
    if kind == "one_way_hard":
        return one_way_hard(int(params["N"]), int(params["k"]), seed, params.get("case"), params.get("site"))
    if kind == "two_way_hard":
        return two_way_hard(int(params["k"]), int(params["rounds"]), int(params["subrounds"]), seed)
    if kind == "zipf":
        return zipf_items(int(params["N"]), int(params["k"]), float(params.get("alpha", 1.1)),
                          int(params.get("U", 100_000)), seed)
    if kind == "random_keys":
        return random_keys(int(params["N"]), int(params["k"]), seed)
    raise ValueError(f"unknown workload kind {kind!r}")
