"""Predictive mean random hot deck.

A donor pool stores observed confounder values with the model-predicted means of
the visits they came from, sorted by predicted mean. A draw for a query mean
picks uniformly among the ``k`` donors whose predicted means are closest; every
donor tied with the ``k``-th smallest distance is a candidate too, so the result
does not depend on storage order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .glm import LinearFit


class EmptyPoolError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DonorPool:
    predicted: np.ndarray
    observed: np.ndarray
    k: int = 5

    def __post_init__(self):
        pred = np.asarray(self.predicted, dtype=float).ravel()
        obs = np.asarray(self.observed, dtype=float).ravel()
        if pred.size != obs.size:
            raise ValueError("predicted and observed must align")
        if pred.size == 0:
            raise EmptyPoolError("donor pool is empty")
        if self.k < 1:
            raise ValueError("k must be positive")
        order = np.lexsort((obs, pred))
        object.__setattr__(self, "predicted", pred[order])
        object.__setattr__(self, "observed", obs[order])

    def __len__(self) -> int:
        return self.predicted.size

    @property
    def entries(self) -> list[tuple[float, float]]:
        return list(zip(self.predicted.tolist(), self.observed.tolist()))

    def candidates(self, z_hat: float) -> np.ndarray:
        """Indices (into the sorted pool) of the candidate donors for ``z_hat``.

        Binary search for the insertion point, then expand outwards one donor at
        a time, taking the nearer side, until ``k`` are held; ties at the
        ``k``-th distance are then added.
        """
        p, n, k = self.predicted, self.predicted.size, min(self.k, self.predicted.size)
        hi = int(np.searchsorted(p, z_hat))
        lo = hi - 1
        taken = 0
        while taken < k:
            if lo < 0:
                hi += 1
            elif hi >= n:
                lo -= 1
            elif z_hat - p[lo] <= p[hi] - z_hat:
                lo -= 1
            else:
                hi += 1
            taken += 1
        # window is (lo, hi); extend by donors tied with the k-th distance
        dk = max(abs(z_hat - p[lo + 1]), abs(p[hi - 1] - z_hat))
        while lo >= 0 and abs(z_hat - p[lo]) <= dk:
            lo -= 1
        while hi < n and abs(p[hi] - z_hat) <= dk:
            hi += 1
        return np.arange(lo + 1, hi)

    def draw(self, z_hat: float, rng: np.random.Generator) -> float:
        """One observed value from the candidates for ``z_hat``."""
        cand = self.candidates(z_hat)
        return float(self.observed[cand[int(rng.random() * cand.size)]])

    def draw_many(self, z_hat, rng: np.random.Generator) -> np.ndarray:
        """Vectorised :meth:`draw` for an array of queries, consuming one uniform per query.

        Equivalent to calling :meth:`draw` on each query in order with the same
        generator.
        """
        z_hat = np.asarray(z_hat, dtype=float)
        u = rng.random(z_hat.size)
        lo, hi = self._windows(z_hat)
        idx = lo + (u * (hi - lo)).astype(np.int64)
        return self.observed[idx]

    def _windows(self, q: np.ndarray):
        """Half-open candidate ranges ``[lo, hi)`` for each query."""
        p, n = self.predicted, self.predicted.size
        k = min(self.k, n)
        pos = np.searchsorted(p, q)
        # k nearest lie in [pos - k, pos + k); evaluate that window (clipped)
        offs = np.arange(-k, k)
        win = np.clip(pos[:, None] + offs[None, :], 0, n - 1)
        dist = np.abs(p[win] - q[:, None])
        valid = (pos[:, None] + offs[None, :] >= 0) & (pos[:, None] + offs[None, :] < n)
        dist = np.where(valid, dist, np.inf)
        dk = np.partition(dist, k - 1, axis=1)[:, k - 1]
        inside = dist <= dk[:, None]
        first = np.argmax(inside, axis=1)
        last = inside.shape[1] - 1 - np.argmax(inside[:, ::-1], axis=1)
        lo = np.clip(pos + offs[first], 0, n - 1)
        hi = np.clip(pos + offs[last], 0, n - 1) + 1
        # ties may continue past the evaluated window; resolve those exactly
        spill = ((lo > 0) & (np.abs(q - p[np.maximum(lo - 1, 0)]) <= dk)) | (
            (hi < n) & (np.abs(p[np.minimum(hi, n - 1)] - q) <= dk))
        for i in np.flatnonzero(spill):
            c = self.candidates(float(q[i]))
            lo[i], hi[i] = c[0], c[-1] + 1
        return lo, hi


def build_pool(fit: LinearFit, X, observed, weights, k: int = 5, indicator: bool = False) -> DonorPool:
    """Donor pool from the rows of ``X``/``observed`` that qualify as donors.

    Donors are rows with weight > 0.5 (posterior weights) or weight == 1
    (indicator weights), so that donors are probable compliers.
    """
    w = np.asarray(weights, dtype=float)
    keep = (w == 1.0) if indicator else (w > 0.5)
    if not np.any(keep):
        raise EmptyPoolError("no donor has enough weight")
    pred = fit.predict(np.asarray(X.values if hasattr(X, "values") else X)[keep])
    return DonorPool(pred, np.asarray(observed, dtype=float)[keep], k)
