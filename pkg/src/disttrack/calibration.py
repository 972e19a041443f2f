"""Monte-Carlo oracles that fix the constants used by the statistical checks.

Each oracle compares an implementation against an independent closed form or
brute-force computation.  :func:`calibrate` runs all of them, and the
resulting constants are frozen in ``constants.json`` next to this module.
"""
from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .count import DEFAULT_CP, sample_reports, site_count_variance
from .freq import sample_counter_process
from .rank import RankTracking, chunk_meter
from .sim import run_simulation
from .summary import ExactSummary, MergeableSummary
from .workloads import random_keys

COUNT_GRID = [(n, p) for n in (10, 100, 1000) for p in (0.5, 0.1, 0.01)]
FREQ_GRID = [(f, p) for f in (1, 2, 5, 10, 20, 50, 100, 1000) for p in (0.5, 0.1, 0.01)]
SUMMARY_EPS = (1 / 4, 1 / 8, 1 / 16)
CALIBRATION_SEEDS = range(10_000, 10_020)
Z = 4.0


def variance_se(x: np.ndarray) -> float:
    """Standard error of the sample variance."""
    c = x - x.mean()
    m4 = np.mean(c**4)
    s2 = np.var(x, ddof=1)
    return math.sqrt(max(m4 - s2**2, 0.0) / x.size)


def count_oracle(trials: int = 200_000, seed: int = 1) -> dict:
    """Mean and variance of the site estimator against ``n`` and the closed form."""
    rng = np.random.default_rng(seed)
    rows = []
    for n, p in COUNT_GRID:
        last = sample_reports(n, p, trials, rng)
        est = np.where(last > 0, last - 1 + 1 / p, 0.0)
        var = site_count_variance(n, p)
        z_mean = (est.mean() - n) / math.sqrt(var / trials) if var else float(est.mean() - n)
        se_v = variance_se(est)
        z_var = (est.var(ddof=1) - var) / se_v if se_v else 0.0
        rows.append({"n": n, "p": p, "mean": float(est.mean()), "var": float(est.var(ddof=1)),
                     "var_formula": var, "z_mean": float(z_mean), "z_var": float(z_var)})
    ok = all(abs(r["z_mean"]) <= Z and abs(r["z_var"]) <= Z for r in rows)
    return {"rows": rows, "ok": ok}


def freq_estimates(f: int, p: float, trials: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draws of the biased (counter only) and final (counter or samples) estimates."""
    cbar, d = sample_counter_process(f, p, trials, rng)
    have = cbar > 0
    biased = np.where(have, cbar - 2 + 2 / p, 0.0)
    final = np.where(have, cbar - 2 + 2 / p, -d / p)
    return biased, final


def freq_oracle(trials: int = 100_000, seed: int = 2) -> dict:
    """Bias of both estimators and the variance constant of the final one."""
    rng = np.random.default_rng(seed)
    rows = []
    for f, p in FREQ_GRID:
        t = trials if f * trials <= 2 * 10**8 else 2 * 10**8 // f
        biased, final = freq_estimates(f, p, t, rng)
        want = f * (1 - p) ** f
        se_b = biased.std(ddof=1) / math.sqrt(t)
        se_f = final.std(ddof=1) / math.sqrt(t)
        rows.append({
            "f": f, "p": p, "trials": t,
            "bias_biased": float(biased.mean() - f), "bias_formula": want,
            "z_biased": float((biased.mean() - f - want) / se_b) if se_b else 0.0,
            "bias_final": float(final.mean() - f),
            "z_final": float((final.mean() - f) / se_f) if se_f else 0.0,
            "var_final_p2": float(final.var(ddof=1) * p * p),
        })
    const = max(r["var_final_p2"] for r in rows)
    ok = all(abs(r["z_biased"]) <= Z and abs(r["z_final"]) <= Z for r in rows) and const <= 6
    return {"rows": rows, "variance_constant": const, "ok": ok}


def summary_errors(eps: float, m: int, seeds, query_ranks) -> np.ndarray:
    """Rank errors of the mergeable summary against the exact one, one row per seed."""
    out = []
    for s in seeds:
        rng = np.random.default_rng([7, s])
        keys = rng.choice(2**62, size=m, replace=False).astype(np.int64)
        mine = MergeableSummary(eps, seed=s)
        mine.insert_many(keys)
        exact = ExactSummary()
        exact.insert_many(keys)
        xs = np.sort(keys)[query_ranks]
        out.append(mine.finalize().rank(xs) - exact.finalize().rank(xs))
    return np.asarray(out, dtype=float)


def summary_oracle(m: int = 4096, trials: int = 10_000) -> dict:
    """Bias and spread of the mergeable summary; ``c_A`` is the worst std / (eps m)."""
    ranks = (np.arange(1, 10) * m) // 10
    nseeds = math.ceil(trials / ranks.size)
    rows = []
    for eps in SUMMARY_EPS:
        err = summary_errors(eps, m, range(nseeds), ranks)
        # the nine queries of one summary are correlated: use per-seed means for the standard error
        per_seed = err.mean(axis=1)
        se = per_seed.std(ddof=1) / math.sqrt(per_seed.size)
        flat = err.ravel()
        rows.append({"eps": eps, "mean": float(flat.mean()), "z_mean": float(flat.mean() / se) if se else 0.0,
                     "std": float(flat.std(ddof=1)), "c": float(flat.std(ddof=1) / (eps * m))})
    c_a = max(r["c"] for r in rows)
    ok = all(abs(r["z_mean"]) <= Z for r in rows) and c_a <= 1
    return {"rows": rows, "c_A": c_a, "ok": ok}


RANK_SETTING = {"N": 200_000, "k": 16, "eps": 0.05}


def ship_scale(geom) -> float:
    """Per-chunk shipped-words scale: sqrt(h) / (eps sqrt(k)) per level, over h levels."""
    h = max(1, geom.height)
    return math.sqrt(h) / (geom.eps * math.sqrt(geom.k)) * h


def space_scale(geom) -> float:
    """Per-site memory scale: sqrt(h) / (eps sqrt(k)) * log2(1/eps)**1.5."""
    h = max(1, geom.height)
    return math.sqrt(h) / (geom.eps * math.sqrt(geom.k)) * math.log2(1 / geom.eps) ** 1.5


def rank_meters(res, workload) -> dict:
    """Chunk variance ratios, shipped-word ratios and the peak-space ratio of one rank run."""
    xs = workload.quantile_keys(np.arange(1, 10) / 10, workload.N - 1)
    mse, b = chunk_meter(res, workload, xs)
    coord = res.coordinator
    ship = []
    for site in res.sites:
        for rnd, seq, _, _, _, words in site.chunks:
            ship.append(words / ship_scale(coord.chunks[(rnd, site.index, seq)].geom))
    space = max(s.peak_words for s in res.sites) / space_scale(coord.geom)
    return {"variance": mse / b**2, "ship": np.asarray(ship), "space": space}


def rank_runs(seeds, N=RANK_SETTING["N"], k=RANK_SETTING["k"], eps=RANK_SETTING["eps"]):
    for s in seeds:
        w = random_keys(N, k, s)
        yield rank_meters(run_simulation(RankTracking(eps), w, seed=s, keep_log=False), w)


def rank_oracle(seeds=CALIBRATION_SEEDS) -> dict:
    runs = list(rank_runs(seeds))
    ratios = np.concatenate([r["variance"] for r in runs])
    return {"chunks": int(ratios.size), "C": float(ratios.max()),
            "p99": float(np.percentile(ratios, 99)),
            "ship_C": float(max(r["ship"].max() for r in runs)),
            "space_C": float(max(r["space"] for r in runs)),
            "ok": bool(np.isfinite(ratios).all())}


def calibrate(out_path=None, quick: bool = False) -> dict:
    """Run every oracle; write the constants file when ``out_path`` is given."""
    scale = 10 if quick else 1
    count = count_oracle(trials=200_000 // scale)
    freq = freq_oracle(trials=100_000 // scale)
    summ = summary_oracle(trials=10_000 // scale)
    rank = rank_oracle(CALIBRATION_SEEDS[:2] if quick else CALIBRATION_SEEDS)
    report = {
        "c_p": DEFAULT_CP,
        "count_error_bound_chebyshev": 1 / DEFAULT_CP**2,
        "c_A": summ["c_A"],
        "freq_variance_constant": freq["variance_constant"],
        "rank_chunk_C": rank["C"],
        "rank_ship_C": rank["ship_C"],
        "rank_space_C": rank["space_C"],
        "oracles": {"count": count, "freq": freq, "summary": summ, "rank": rank},
        "ok": count["ok"] and freq["ok"] and summ["ok"] and rank["ok"],
    }
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    return report


def load_constants() -> dict:
    """The frozen constants shipped with the package."""
    return json.loads(resources.files(__package__).joinpath("constants.json").read_text(encoding="utf-8"))
