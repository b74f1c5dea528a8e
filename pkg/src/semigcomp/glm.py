"""Weighted maximum-likelihood fits for Gaussian and logistic regression.

Both fitters accept real-valued, non-negative per-row weights; the logistic
fitter also accepts fractional responses in [0, 1] so that it can serve as the
M-step of an EM algorithm with soft labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

LOG_2PI = np.log(2.0 * np.pi)

#: Bound on the largest standardized logistic coefficient before the fit is
#: declared separated (|logit| = 30 puts p within ~1e-13 of 0 or 1).
SEPARATION_BOUND = 30.0

_RANK_RTOL = 1e-10


class RankDeficientError(np.linalg.LinAlgError):
    """The weighted design is singular; ``columns`` lists the dependent ones."""

    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"rank-deficient design; collinear columns: {', '.join(self.columns)}")


class ZeroWeightError(ValueError):
    """Total weight too small to identify the coefficients."""


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        if len(self.labels) != values.shape[1]:
            raise ValueError("one label per column required")
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix has non-finite entries")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> int:
        return self.values.shape[1]


def as_design(X, labels: Sequence[str] | None = None) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if labels is None:
        labels = tuple(f"x{k}" for k in range(X.shape[1]))
    return DesignMatrix(X, tuple(labels))


@dataclass(frozen=True)
class LinearFit:
    """Weighted Gaussian regression.

    ``sigma2`` is the weighted MLE ``sum(w * r**2) / sum(w)``, not the unbiased
    residual variance.
    """

    coef: np.ndarray
    sigma2: float
    n_effective: float
    labels: tuple[str, ...] = ()

    def predict(self, X) -> np.ndarray:
        X = _matrix(X)
        if X.shape[1] != self.coef.size:
            raise ValueError(f"design has {X.shape[1]} columns, fit expects {self.coef.size}")
        return X @ self.coef

    def logpdf(self, X, y) -> np.ndarray:
        return gaussian_logpdf(y, self.predict(X), self.sigma2)

    def with_sigma2(self, sigma2: float) -> "LinearFit":
        return LinearFit(self.coef, float(sigma2), self.n_effective, self.labels)


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    separated: bool = False
    labels: tuple[str, ...] = ()
    loglik_trace: tuple[float, ...] = field(default=(), repr=False)

    def decision_function(self, X) -> np.ndarray:
        X = _matrix(X)
        if X.shape[1] != self.coef.size:
            raise ValueError(f"design has {X.shape[1]} columns, fit expects {self.coef.size}")
        return X @ self.coef

    def predict(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def negate(self) -> "LogisticFit":
        return LogisticFit(-self.coef, self.converged, self.iterations, self.separated,
                           self.labels, self.loglik_trace)


def _matrix(X) -> np.ndarray:
    if isinstance(X, DesignMatrix):
        return X.values
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _check_inputs(design: DesignMatrix, y, w):
    y = np.asarray(y, dtype=float).ravel()
    n = design.rows
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).ravel()
    if y.size != n or w.size != n:
        raise ValueError(f"y and w must have {n} entries (got {y.size}, {w.size})")
    if not np.all(np.isfinite(y)):
        raise ValueError("response has non-finite entries")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    if w.sum() <= design.columns:
        raise ZeroWeightError(
            f"total weight {w.sum():.6g} does not exceed the {design.columns} coefficients"
        )
    return y, w


def _weighted_solve(A: np.ndarray, b: np.ndarray, labels: Sequence[str]) -> np.ndarray:
    """Least squares ``min ||A beta - b||`` by pivoted QR with an explicit rank check."""
    Q, R, perm = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > _RANK_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
    if rank < A.shape[1]:
        raise RankDeficientError([labels[k] for k in sorted(perm[rank:])])
    beta = np.empty(A.shape[1])
    beta[perm] = linalg.solve_triangular(R, Q.T @ b)
    return beta


def fit_weighted_linear(X, y, w=None) -> LinearFit:
    """Weighted least squares, which is the weighted Gaussian MLE for the mean.

    Parameters
    ----------
    X : array_like or DesignMatrix, shape (n, p)
    y : array_like, shape (n,)
    w : array_like, shape (n,), optional
        Non-negative weights; unit weights when omitted.

    Raises
    ------
    RankDeficientError
        If the weighted design is singular.
    ZeroWeightError
        If ``sum(w) <= p``.
    """
    design = as_design(X)
    y, w = _check_inputs(design, y, w)
    sw = np.sqrt(w)
    coef = _weighted_solve(design.values * sw[:, None], y * sw, design.labels)
    resid = y - design.values @ coef
    wsum = float(w.sum())
    sigma2 = float(np.dot(w, resid * resid) / wsum)
    return LinearFit(coef, sigma2, wsum, design.labels)


def logistic_loglik(coef, X, y, w) -> float:
    return _loglik_eta(_matrix(X) @ coef, y, w)


def _loglik_eta(eta, y, w) -> float:
    # y log p + (1 - y) log(1 - p) = y eta + log(1 - p)
    return float(np.dot(w, y * eta + log_expit(-eta)))


def _newton_step(Xs, v, r, labels):
    """Solve ``(Xs' V Xs) step = Xs' r`` by Cholesky.

    A numerically singular Hessian is re-solved by pivoted QR on the
    square-root-weighted design, which raises naming the dependent columns.
    """
    H = Xs.T @ (v[:, None] * Xs)
    eig = np.linalg.eigvalsh(H)
    if eig[-1] > 0 and eig[0] > _RANK_RTOL**2 * eig[-1]:
        try:
            return linalg.cho_solve(linalg.cho_factor(H), Xs.T @ r)
        except linalg.LinAlgError:
            pass
    ok = v > 0
    sv = np.sqrt(v[ok])
    return _weighted_solve(Xs[ok] * sv[:, None], r[ok] / sv, labels)


def fit_weighted_logistic(X, y, w=None, tol: float = 1e-8, max_iter: int = 100,
                          start=None) -> LogisticFit:
    """Weighted logistic regression by IRLS (Newton) with step halving.

    Maximizes ``sum(w * (y log p + (1 - y) log(1 - p)))`` for ``y`` in [0, 1].
    The objective is non-decreasing across iterations. Converged means the
    largest absolute coefficient change fell below ``tol`` within ``max_iter``
    iterations. A fit whose largest coefficient on the column-standardized
    design exceeds ``SEPARATION_BOUND`` stops early with ``separated=True``
    and ``converged=False``.
    """
    design = as_design(X)
    y, w = _check_inputs(design, y, w)
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("logistic response must lie in [0, 1]")
    Xv = design.values
    scale = Xv.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = Xv / scale

    beta = np.zeros(design.columns) if start is None else np.asarray(start, float) * scale
    eta = Xs @ beta
    ll = _loglik_eta(eta, y, w)
    trace = [ll]
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        v = w * p * (1.0 - p)
        if not np.any(v > 0):
            break
        step = _newton_step(Xs, v, w * (y - p), design.labels)
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = Xs @ cand
            ll_c = _loglik_eta(eta_c, y, w)
            if ll_c >= ll or t < 1e-10:
                break
            t *= 0.5
        if ll_c < ll:
            # no ascent along the Newton direction: optimal up to rounding
            converged = True
            break
        delta = np.max(np.abs((cand - beta) / scale))
        beta, eta, ll = cand, eta_c, ll_c
        trace.append(ll)
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            separated = True
            break
        if delta < tol:
            converged = True
            break
    return LogisticFit(beta / scale, converged, it, separated, design.labels, tuple(trace))


def gaussian_logpdf(y, mean, sigma2):
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    r = np.asarray(y, dtype=float) - mean
    return -0.5 * (LOG_2PI + np.log(sigma2) + r * r / sigma2)


def gaussian_density(y, mean, sigma2):
    """Normal density with variance ``sigma2``."""
    return np.exp(gaussian_logpdf(y, mean, sigma2))


def predict(fit, X) -> np.ndarray:
    """Mean prediction: ``X @ coef`` for linear fits, ``expit(X @ coef)`` for logistic."""
    return fit.predict(X)


class WeightedLinearRegression(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`fit_weighted_linear`.

    The design is used as given (no implicit intercept column).
    """

    def fit(self, X, y, sample_weight=None):
        self.fit_ = fit_weighted_linear(X, y, sample_weight)
        self.coef_ = self.fit_.coef
        self.sigma2_ = self.fit_.sigma2
        self.n_features_in_ = self.coef_.size
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(X)


class WeightedLogisticRegression(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`fit_weighted_logistic`.

    ``fit`` accepts fractional targets; ``classes_`` is always ``[0, 1]``.
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, sample_weight=None):
        self.fit_ = fit_weighted_logistic(X, y, sample_weight, tol=self.tol, max_iter=self.max_iter)
        self.coef_ = self.fit_.coef
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = self.coef_.size
        return self

    def decision_function(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.decision_function(X)

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)
