"""Participant-level bootstrap for standard errors and percentile intervals.

Each replicate resamples participants with replacement within each arm, so
every resampled participant keeps all of their visits and the arm sizes are
those of the data. The whole analysis is rerun on the resample, including the
EM fit of the compliance mixture, which is warm-started from the full-data fit.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .data import LongitudinalDataset
from .pipeline import AnalysisConfig, InputError, PipelineResult, check_request, run_estimators

MAX_FAILED = 0.05


class BootstrapFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap distribution of one estimator.

    ``replicates`` holds the successful replicate estimates in replicate order;
    ``B`` is the number requested and ``failures`` the number excluded.
    """

    estimator: str
    estimate: float
    replicates: tuple[float, ...]
    se: float
    ci95: tuple[float, float]
    B: int
    R: int
    seed: int
    failures: int = 0

    def __post_init__(self):
        if len(self.replicates) != self.B - self.failures:
            raise ValueError("replicate count does not match B minus failures")
        if self.ci95[0] > self.ci95[1]:
            raise ValueError("interval endpoints out of order")


def percentile_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Order statistics at ranks ``ceil(a B)`` and ``ceil((1 - a) B)`` (1-based),
    with ``a = (1 - level) / 2`` and ``B`` the number of values."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("no replicate estimates")
    a = (1.0 - level) / 2.0
    # round before ceil so that 0.025 * 200 counts as exactly 5
    lo = max(math.ceil(round(a * v.size, 9)), 1)
    hi = max(math.ceil(round((1.0 - a) * v.size, 9)), 1)
    return float(v[lo - 1]), float(v[hi - 1])


def resample_rows(ds: LongitudinalDataset, rng: np.random.Generator) -> np.ndarray:
    """Row indices of a participant-level resample, stratified by arm."""
    parts = []
    for arm in ds.arms:
        rows = np.flatnonzero(ds.arm == arm)
        parts.append(rows[rng.integers(0, rows.size, rows.size)])
    return np.concatenate(parts)


def _replicate(ds, names, cfg, seed, b, full: PipelineResult):
    ss = np.random.SeedSequence(seed, spawn_key=(b,))
    rng = np.random.default_rng(ss)
    mc_seed = int(ss.spawn(1)[0].generate_state(1)[0])
    with threadpool_limits(1):
        res = run_estimators(ds.resample(resample_rows(ds, rng)), names, cfg, mc_seed,
                             mixture_start=full.mixture, emreg_start=full.emreg)
    return [res.estimates.get(n, math.nan) for n in names]


def bootstrap(ds: LongitudinalDataset, estimators, B: int = 1000, R: int = 10_000, seed: int = 0,
              cfg: AnalysisConfig = AnalysisConfig(), threads: int = 1,
              full: PipelineResult | None = None) -> dict[str, BootstrapResult]:
    """Bootstrap every estimator in ``estimators`` over the same ``B`` resamples.

    Replicate ``b`` uses a stream keyed by ``(seed, b)`` only, so results do
    not depend on ``threads``.

    Raises
    ------
    BootstrapFailure
        When more than 5% of the replicates of an estimator fail, or the
        full-data fit fails.
    """
    names = tuple(estimators)
    if B < 1:
        raise InputError("B must be at least 1")
    cfg = cfg.replace(R=R)
    check_request(ds, names, cfg)
    if full is None:
        full = run_estimators(ds, names, cfg, seed)
    if full.failures:
        name, why = next(iter(full.failures.items()))
        raise BootstrapFailure(f"full-data {name} failed: {why}")
    jobs = [delayed(_replicate)(ds, names, cfg, seed, b, full) for b in range(B)]
    out = Parallel(n_jobs=threads)(jobs) if threads > 1 else [
        _replicate(ds, names, cfg, seed, b, full) for b in range(B)]
    est = np.array(out, dtype=float).reshape(B, len(names))
    results = {}
    for k, name in enumerate(names):
        vals = est[~np.isnan(est[:, k]), k]
        failed = B - vals.size
        if failed > MAX_FAILED * B:
            raise BootstrapFailure(f"{name}: {failed} of {B} bootstrap replicates failed")
        if vals.size > 1:
            mean = math.fsum(vals) / vals.size
            se = math.sqrt(math.fsum((vals - mean) ** 2) / (vals.size - 1))
        else:
            se = 0.0
        results[name] = BootstrapResult(name, full.estimates[name], tuple(float(v) for v in vals),
                                        se, percentile_ci(vals), B, R, seed, failed)
    return results


def summary_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "estimate", "se", "ci_low", "ci_high", "B", "R", "seed", "failures"])
    for r in results.values():
        w.writerow([r.estimator, repr(r.estimate), repr(r.se), repr(r.ci95[0]), repr(r.ci95[1]),
                    r.B, r.R, r.seed, r.failures])
    return buf.getvalue()


def replicates_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "index", "estimate"])
    for r in results.values():
        for i, v in enumerate(r.replicates):
            w.writerow([r.estimator, i, repr(v)])
    return buf.getvalue()
