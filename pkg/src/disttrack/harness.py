"""Experiment runner: specs, probe schedules, replicated runs, sweeps and CSV output."""
from __future__ import annotations

import configparser
import csv
import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sstats

from .baselines import DetCount, PrioritySample
from .count import CountTracking, copy_seed
from .freq import FreqTracking
from .rank import RankTracking
from .sim import COORDINATOR, recount, run_simulation, write_log_csv
from .workloads import make_workload

TRACKERS = ("count", "det_count", "freq", "rank", "sample")
CHECKS = ("ledger", "replay", "accuracy", "consistency")
CSV_COLUMNS = ["seed", "probe_t", "truth", "estimate", "abs_err", "rel_err", "msgs_up", "msgs_down",
               "words_up", "words_down", "peak_site_words", "row", "query"]
DEFAULT_PHIS = tuple(i / 10 for i in range(1, 10))


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    tracker: str = "count"
    workload: dict = field(default_factory=lambda: {"kind": "round_robin"})
    k: int = 16
    eps: float = 0.05
    N: int = 100_000
    delta: float = 0.1
    copies: int = 1
    probes: str | list = "growth"
    seeds: list = field(default_factory=lambda: [0])
    queries: object = None
    c_p: float = 4.0
    c_r: float = 1.0
    summary: str = "mergeable"
    sample_c: float = 4.0
    checks: tuple = ("ledger",)

    def validate(self) -> None:
        if self.tracker not in TRACKERS:
            raise SpecError(f"tracker must be one of {TRACKERS}, got {self.tracker!r}")
        if self.k < 1:
            raise SpecError("k must be >= 1")
        if not 0 < self.eps < 1 and not (self.tracker == "det_count" and self.eps == 1):
            raise SpecError("eps must be in (0, 1)")
        if self.N < 0:
            raise SpecError("N must be >= 0")
        if self.copies < 1 or self.copies % 2 == 0:
            raise SpecError("copies must be a positive odd number")
        if not self.seeds:
            raise SpecError("at least one seed is needed")
        bad = set(self.checks) - set(CHECKS)
        if bad:
            raise SpecError(f"unknown checks {sorted(bad)}")
        if self.tracker == "rank" and self.workload.get("kind") != "random_keys":
            raise SpecError("rank tracking needs the random_keys workload (distinct keys)")
        if self.tracker == "freq" and self.workload.get("kind") != "zipf":
            raise SpecError("frequency tracking needs a keyed workload (zipf)")
        if self.k > 1 / self.eps**2:
            warnings.warn(f"k={self.k} exceeds 1/eps^2; outside the intended parameter regime", stacklevel=2)

    @property
    def problem(self) -> str:
        if self.tracker in ("count", "det_count"):
            return "count"
        if self.tracker == "freq":
            return "frequency"
        if self.tracker == "rank":
            return "rank"
        return self.workload.get("problem", "count")

    def protocol(self):
        if self.tracker == "count":
            return CountTracking(self.eps, self.c_p)
        if self.tracker == "det_count":
            return DetCount(self.eps)
        if self.tracker == "freq":
            return FreqTracking(self.eps, self.c_p)
        if self.tracker == "rank":
            return RankTracking(self.eps, self.c_r, self.summary)
        return PrioritySample(self.eps, self.sample_c, self.problem)

    def build_workload(self, seed: int):
        params = {k: v for k, v in self.workload.items() if k not in ("kind", "problem")}
        params.setdefault("N", self.N)
        params.setdefault("k", self.k)
        return make_workload(self.workload["kind"], seed, **params)


# config files ------------------------------------------------------------

def _parse_seeds(text: str) -> list[int]:
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_config(text: str) -> ExperimentSpec:
    """Parse flat ``key = value`` text into a spec."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as e:
        raise SpecError(f"malformed config: {e}") from None
    raw = dict(cp["run"])
    spec = ExperimentSpec()
    wl = {}
    for key, val in raw.items():
        if key.startswith("workload."):
            wl[key.split(".", 1)[1]] = _number(val)
        elif key in ("k", "N", "copies"):
            setattr(spec, key, int(float(val)))
        elif key in ("eps", "delta", "c_p", "c_r", "sample_c"):
            setattr(spec, key, float(val))
        elif key in ("tracker", "summary"):
            setattr(spec, key, val)
        elif key == "seeds":
            spec.seeds = _parse_seeds(val)
        elif key == "probes":
            spec.probes = val if val == "growth" else [int(x) for x in val.split(",") if x.strip()]
        elif key == "queries":
            spec.queries = val
        elif key == "checks":
            spec.checks = tuple(x.strip() for x in val.split(",") if x.strip())
        else:
            raise SpecError(f"unknown config key {key!r}")
    if "kind" not in wl:
        raise SpecError("workload.kind is required")
    spec.workload = wl
    for key in ("N", "k"):
        if key in spec.workload:
            setattr(spec, key, int(spec.workload[key]))
    spec.validate()
    return spec


def load_config(path) -> ExperimentSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# probes and queries ------------------------------------------------------

def growth_probes(N: int, eps: float) -> list[int]:
    """Arrival indices at which n has grown by another factor ``1 + eps``, plus the last one."""
    if N <= 0:
        return []
    out = []
    n = 1
    while n <= N:
        out.append(n - 1)
        n = max(n + 1, math.ceil(n * (1 + eps)))
    if out[-1] != N - 1:
        out.append(N - 1)
    return out


def resolve_probes(spec: ExperimentSpec, N: int) -> list[int]:
    if spec.probes == "growth":
        return growth_probes(N, spec.eps)
    return sorted(t for t in spec.probes if 0 <= t < N)


def resolve_queries(spec: ExperimentSpec, workload):
    problem = spec.problem
    q = spec.queries
    if problem == "count":
        return None
    if problem == "frequency":
        if q is None or (isinstance(q, str) and q.startswith("top")):
            m = 10 if q is None or ":" not in q else int(q.split(":")[1])
            return workload.top_items(m)
        return np.asarray([int(x) for x in str(q).split(",")], dtype=np.int64)
    if q is None:
        return np.asarray(DEFAULT_PHIS)
    return np.asarray([float(x) for x in str(q).split(",")])


# running -----------------------------------------------------------------

@dataclass
class SeedOutcome:
    seed: int
    rows: list[dict]
    summary: dict
    checks: dict


def _accuracy_ok(spec, rows) -> bool:
    """Fraction of rows with error within eps * n is at least 1 - delta."""
    if not rows:
        return True
    if spec.problem == "count":
        bad = sum(r["abs_err"] > spec.eps * r["truth"] for r in rows)
    else:
        bad = sum(r["abs_err"] > spec.eps * (r["probe_t"] + 1) for r in rows)
    return bad <= spec.delta * len(rows)


def _ledger_ok(res, k) -> bool:
    if res.log is None:
        return False
    if recount(res.log, k) != res.stats or not res.stats.consistent():
        return False
    # every coordinator send is part of a full broadcast
    down = {}
    for m in res.log:
        if m.src == COORDINATOR:
            down[m.kind] = down.get(m.kind, 0) + 1
    return all(v % k == 0 for v in down.values())


def run_seed(spec: ExperimentSpec, seed: int, keep_log: bool = False) -> SeedOutcome:
    """All probes for one seed; boosted runs take the per-row median over copies."""
    workload = spec.build_workload(seed)
    N = workload.N
    k = workload.k
    probes = resolve_probes(spec, N)
    queries = resolve_queries(spec, workload)
    protocol = spec.protocol()
    need_log = keep_log or "ledger" in spec.checks or "replay" in spec.checks
    results = [run_simulation(protocol, workload, probes, copy_seed(seed, c), queries, keep_log=need_log)
               for c in range(spec.copies)]
    checks = {}
    if "ledger" in spec.checks:
        checks["ledger"] = all(_ledger_ok(r, k) for r in results)
    if "replay" in spec.checks:
        again = run_simulation(protocol, workload, probes, seed, queries, keep_log=True)
        checks["replay"] = again.log == results[0].log and again.records == results[0].records
    if "consistency" in spec.checks and spec.tracker == "count":
        c = results[0].coordinator
        total = sum(c.site_estimates())
        checks["consistency"] = math.isclose(total, c.estimate(), rel_tol=1e-9, abs_tol=1e-6)

    rows = []
    base = results[0].records
    for i, rec in enumerate(base):
        est = float(np.median([r.records[i].estimate for r in results]))
        snap = [sum(getattr(r.records[i], f) for r in results)
                for f in ("msgs_up", "msgs_down", "words_up", "words_down")]
        peak = max(r.records[i].peak_site_words for r in results)
        abs_err = abs(est - rec.truth)
        rows.append({
            "seed": seed, "probe_t": rec.t, "truth": rec.truth, "estimate": est,
            "abs_err": abs_err, "rel_err": abs_err / rec.truth if rec.truth else (0.0 if not abs_err else math.inf),
            "msgs_up": snap[0], "msgs_down": snap[1], "words_up": snap[2], "words_down": snap[3],
            "peak_site_words": peak, "row": "probe", "query": "" if rec.query is None else rec.query,
        })
    if "accuracy" in spec.checks:
        checks["accuracy"] = _accuracy_ok(spec, rows)
    tot = [sum(getattr(r.stats, f) for r in results) for f in ("messages_up", "messages_down", "words_up", "words_down")]
    summary = {
        "seed": seed, "probe_t": N, "truth": "", "estimate": "",
        "abs_err": max((r["abs_err"] for r in rows), default=0.0),
        "rel_err": max((r["rel_err"] for r in rows), default=0.0),
        "msgs_up": tot[0], "msgs_down": tot[1], "words_up": tot[2], "words_down": tot[3],
        "peak_site_words": max(r.peak_site_words() for r in results), "row": "summary", "query": "",
    }
    return SeedOutcome(seed, rows, summary, checks)


def _map(fn, args, workers):
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, *zip(*args)))


@dataclass
class RunResult:
    spec: ExperimentSpec
    outcomes: list[SeedOutcome]

    @property
    def ok(self) -> bool:
        return all(all(o.checks.values()) for o in self.outcomes)

    def failed_checks(self) -> list[tuple[int, str]]:
        return [(o.seed, name) for o in self.outcomes for name, v in o.checks.items() if not v]

    def rows(self, summaries: bool = True):
        for o in self.outcomes:
            yield from o.rows
            if summaries:
                yield o.summary

    def write_csv(self, fh) -> None:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        if self.spec.N == 0:
            return
        for r in self.rows():
            w.writerow(r)

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def summary_means(self) -> dict:
        keys = ("msgs_up", "msgs_down", "words_up", "words_down")
        return {k: float(np.mean([o.summary[k] for o in self.outcomes])) for k in keys}


def run(spec: ExperimentSpec, workers: int | None = 1) -> RunResult:
    spec.validate()
    if spec.N == 0:
        return RunResult(spec, [])
    outs = _map(run_seed, [(spec, s) for s in spec.seeds], workers)
    return RunResult(spec, outs)


def dump_messages(spec: ExperimentSpec, fh, seed: int | None = None) -> None:
    """Write the message log of every copy of one seed as CSV."""
    spec.validate()
    seed = spec.seeds[0] if seed is None else seed
    workload = spec.build_workload(seed)
    queries = resolve_queries(spec, workload)
    protocol = spec.protocol()
    for c in range(spec.copies):
        res = run_simulation(protocol, workload, (), copy_seed(seed, c), queries, keep_log=True)
        write_log_csv(res.log, fh, run_id=f"{seed}:{c}", header=(c == 0))


# sweeps ------------------------------------------------------------------

@dataclass
class SlopeFit:
    axis: str
    values: list
    x: np.ndarray
    y: np.ndarray
    y_std: np.ndarray
    words: np.ndarray
    slope: float
    intercept: float
    ci: tuple[float, float]

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.slope <= hi

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "x", "mean_messages", "std_messages", "mean_words"])
        for v, x, y, s, wd in zip(self.values, self.x, self.y, self.y_std, self.words):
            w.writerow([self.axis, v, x, y, s, wd])
        w.writerow(["slope", self.slope, self.ci[0], self.ci[1], "", ""])
        return buf.getvalue()


def loglog_fit(x, y, level: float = 0.95):
    """Least-squares slope of log y against log x with a t-based confidence interval."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 4:
        raise ValueError("a slope fit needs at least 4 points")
    fit = sstats.linregress(np.log(x), np.log(y))
    half = sstats.t.ppf(0.5 + level / 2, x.size - 2) * fit.stderr
    return fit.slope, fit.intercept, (fit.slope - half, fit.slope + half)


def sweep_x(axis: str, value) -> float:
    if axis == "k":
        return float(value)
    if axis == "eps":
        return 1.0 / float(value)
    if axis == "N":
        return math.log(float(value))
    raise SpecError(f"axis must be k, eps or N, got {axis!r}")


def _total_messages(spec: ExperimentSpec, seed: int) -> tuple[int, int]:
    workload = spec.build_workload(seed)
    total_m = total_w = 0
    for c in range(spec.copies):
        res = run_simulation(spec.protocol(), workload, (), copy_seed(seed, c), keep_log=False)
        total_m += res.stats.messages
        total_w += res.stats.words
    return total_m, total_w


def with_axis(spec: ExperimentSpec, axis: str, value) -> ExperimentSpec:
    wl = dict(spec.workload)
    if axis == "k":
        wl.pop("k", None)
        return replace(spec, k=int(value), workload=wl)
    if axis == "eps":
        return replace(spec, eps=float(value))
    if axis == "N":
        wl.pop("N", None)
        return replace(spec, N=int(value), workload=wl)
    raise SpecError(f"axis must be k, eps or N, got {axis!r}")


def sweep(axis: str, values, base: ExperimentSpec, workers: int | None = 1, min_seeds: int = 20) -> SlopeFit:
    """Mean total messages per axis value and their log-log slope.

    The abscissa is ``k``, ``1/eps`` or ``log N``.
    """
    values = list(values)
    if len(values) < 4:
        raise SpecError("a sweep needs at least 4 values for a slope fit")
    if len(base.seeds) < min_seeds:
        raise SpecError(f"a sweep needs at least {min_seeds} seeds per point")
    specs = [with_axis(base, axis, v) for v in values]
    for s in specs:
        s.validate()
    jobs = [(s, seed) for s in specs for seed in base.seeds]
    totals = _map(_total_messages, jobs, workers)
    ns = len(base.seeds)
    msgs = np.array([t[0] for t in totals], dtype=float).reshape(len(values), ns)
    words = np.array([t[1] for t in totals], dtype=float).reshape(len(values), ns)
    x = np.array([sweep_x(axis, v) for v in values])
    y = msgs.mean(axis=1)
    slope, icpt, ci = loglog_fit(x, y)
    return SlopeFit(axis, values, x, y, msgs.std(axis=1, ddof=1) if ns > 1 else np.zeros(len(values)),
                    words.mean(axis=1), slope, icpt, ci)
