"""One-pass rank summaries with unbiased rank estimates.

Two implementations share the same interface:

* :class:`ExactSummary` keeps every key (the oracle).
* :class:`MergeableSummary` keeps a binary counter of sorted buffers.  Two
  full buffers of weight ``w`` are merged by sorting their union and keeping
  every other entry from a random start, which gives a buffer of weight
  ``2w``.  The rank of any query is preserved in expectation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import mix64


class SummaryError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankSummary:
    """Weighted sorted keys; the estimated rank of x is the weight below x."""

    keys: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        cum = np.concatenate([[0], np.cumsum(self.weights, dtype=np.int64)])
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def from_parts(cls, parts) -> "RankSummary":
        """Union of ``(keys, weight)`` parts."""
        parts = [(np.asarray(k, dtype=np.int64), w) for k, w in parts if len(k)]
        if not parts:
            return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
        keys = np.concatenate([k for k, _ in parts])
        weights = np.concatenate([np.full(k.size, w, dtype=np.int64) for k, w in parts])
        order = np.argsort(keys, kind="stable")
        return cls(keys[order], weights[order])

    @property
    def size(self) -> int:
        return int(self.keys.size)

    @property
    def count(self) -> int:
        """Total weight, i.e. the number of keys summarized."""
        return int(self._cum[-1])

    def rank(self, x):
        idx = np.searchsorted(self.keys, np.asarray(x, dtype=np.int64), side="left")
        return self._cum[idx]

    def words(self) -> int:
        return 2 * self.size

    def wire(self) -> tuple:
        """Flattened (key, log2 weight) pairs."""
        exps = np.log2(self.weights).astype(np.int64) if self.size else self.weights
        return tuple(np.column_stack([self.keys, exps]).ravel().tolist())

    @classmethod
    def from_wire(cls, payload) -> "RankSummary":
        a = np.asarray(payload, dtype=np.int64).reshape(-1, 2)
        return cls(a[:, 0].copy(), np.left_shift(1, a[:, 1]).astype(np.int64))


def merge_subsample(a: np.ndarray, b: np.ndarray, offset: int) -> np.ndarray:
    """Merge two sorted equal-size buffers and keep every other key from ``offset``.

    The caller doubles the weight.  ``offset`` must be 0 or 1.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size != b.size:
        raise SummaryError("buffers must have equal size")
    if offset not in (0, 1):
        raise SummaryError("offset must be 0 or 1")
    both = np.concatenate([a, b])
    both.sort()
    return both[offset::2]


def summary_merge_subsample(buf_a, weight_a: int, buf_b, weight_b: int, offset: int):
    """Weighted form of :func:`merge_subsample`; returns ``(keys, 2 * weight)``."""
    if weight_a != weight_b:
        raise SummaryError("can only merge buffers of equal weight")
    return merge_subsample(buf_a, buf_b, offset), 2 * weight_a


def base_buffer_size(eps: float) -> int:
    """Buffer size giving standard deviation well under ``eps * m``."""
    if not 0 < eps <= 1:
        raise ValueError("eps must be in (0, 1]")
    inv = 1.0 / eps
    return max(1, math.ceil(inv * math.sqrt(math.log2(inv) + 1)))


class ExactSummary:
    """Keeps all keys; every rank estimate is exact."""

    def __init__(self, eps: float = 1.0, seed: int = 0):
        self.eps = eps
        self._keys: list[np.ndarray] = []
        self._n = 0
        self._final = False

    def insert(self, key) -> None:
        self.insert_many(np.asarray([key], dtype=np.int64))

    def insert_many(self, keys) -> None:
        if self._final:
            raise SummaryError("summary already finalized")
        keys = np.asarray(keys, dtype=np.int64)
        self._keys.append(keys.copy())
        self._n += keys.size

    @property
    def count(self) -> int:
        return self._n

    def words(self) -> int:
        return self._n

    def words_after(self, extra: np.ndarray) -> np.ndarray:
        """Words held after ``extra`` more insertions."""
        return self._n + np.asarray(extra)

    def finalize(self) -> RankSummary:
        if self._final:
            raise SummaryError("finalize called twice")
        self._final = True
        return RankSummary.from_parts([(k, 1) for k in self._keys])


class MergeableSummary:
    """Binary counter of sorted buffers with random-offset merging.

    Level ``j`` holds at most one full buffer of ``s`` keys of weight ``2**j``;
    level 0 also holds the partially filled input buffer.  Merge offsets are
    a hash of ``(seed, level, merge number)``, so inserting keys one at a time
    or in batches yields the same summary.
    """

    def __init__(self, eps: float, seed: int = 0, buffer_size: int | None = None):
        self.eps = eps
        self.s = base_buffer_size(eps) if buffer_size is None else int(buffer_size)
        if self.s < 1:
            raise SummaryError("buffer size must be >= 1")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._partial = np.empty(0, dtype=np.int64)
        self._held: dict[int, np.ndarray] = {}
        self._merges: dict[int, int] = {}
        self._n = 0
        self._final = False

    @property
    def count(self) -> int:
        return self._n

    def entries(self) -> int:
        return self._partial.size + sum(b.size for b in self._held.values())

    def words(self) -> int:
        return 2 * self.entries()

    def words_after(self, extra: np.ndarray) -> np.ndarray:
        """Words held after ``extra`` more insertions.

        The layout depends only on the count: ``n mod s`` partial entries plus
        one full buffer per set bit of ``n // s``.
        """
        n = self._n + np.asarray(extra, dtype=np.int64)
        return 2 * (n % self.s + self.s * np.bitwise_count(n // self.s).astype(np.int64))

    def insert(self, key) -> None:
        self.insert_many(np.asarray([key], dtype=np.int64))

    def insert_many(self, keys) -> None:
        if self._final:
            raise SummaryError("summary already finalized")
        keys = np.asarray(keys, dtype=np.int64)
        self._n += keys.size
        s = self.s
        buf = np.concatenate([self._partial, keys]) if self._partial.size else keys
        nfull = buf.size // s
        self._partial = buf[nfull * s:].copy()
        if not nfull:
            return
        rows = np.sort(buf[:nfull * s].reshape(nfull, s), axis=1)
        level = 0
        while rows.shape[0]:
            held = self._held.pop(level, None)
            if held is not None:
                rows = np.vstack([held[None, :], rows])
            npairs = rows.shape[0] // 2
            if rows.shape[0] % 2:
                self._held[level] = rows[-1].copy()
            if not npairs:
                break
            pairs = rows[:2 * npairs].reshape(npairs, 2 * s)
            pairs.sort(axis=1)
            first = self._merges.get(level, 0)
            self._merges[level] = first + npairs
            offs = self.merge_offsets(level, first, npairs)
            cols = offs[:, None] + 2 * np.arange(s)[None, :]
            rows = np.take_along_axis(pairs, cols, axis=1)
            level += 1

    def merge_offsets(self, level: int, first: int, npairs: int) -> np.ndarray:
        """Start offsets (0 or 1) of merges ``first .. first + npairs - 1`` at ``level``."""
        return (mix64(self.seed, level, np.arange(first, first + npairs)) & np.uint64(1)).astype(np.int64)

    def finalize(self) -> RankSummary:
        if self._final:
            raise SummaryError("finalize called twice")
        self._final = True
        parts = [(self._partial, 1)] + [(b, 1 << lvl) for lvl, b in self._held.items()]
        return RankSummary.from_parts(parts)


SUMMARIES = {"mergeable": MergeableSummary, "exact": ExactSummary}
