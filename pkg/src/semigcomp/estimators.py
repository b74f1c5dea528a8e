"""Comparison estimators: ITT, Per Protocol and the joint-mixture regression (EM-REG)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import EstimationView, LongitudinalDataset, estimation_view
from .design import DesignRecipe, biomarker_design, omega_design, outcome_design
from .glm import LinearFit, LogisticFit
from .mixture import EmTrace, _loglik, _posterior, _run_em, init_strategy


class EstimatorError(ValueError):
    pass


def _final_outcomes(ds: LongitudinalDataset, arm: str) -> np.ndarray:
    rows = ds.arm == arm
    y = ds.y[rows, -1]
    return y[~ds.missing[rows, -1]]


def itt(ds: LongitudinalDataset, arm: str, other: str) -> tuple[float, float, float]:
    """Complete-case final-visit means of ``arm`` and ``other`` and their difference."""
    ya, yb = _final_outcomes(ds, arm), _final_outcomes(ds, other)
    if ya.size == 0 or yb.size == 0:
        raise EstimatorError("both arms need complete final-visit outcomes")
    return float(ya.mean()), float(yb.mean()), float(ya.mean() - yb.mean())


def full_compliers(ds: LongitudinalDataset, arm: str | None = None) -> np.ndarray:
    """Participants reporting compliance at every post-baseline visit."""
    keep = np.all(ds.d[:, 1:] == 1, axis=1) & ~ds.missing[:, -1]
    if arm is not None:
        keep &= ds.arm == arm
    return keep


def per_protocol(ds: LongitudinalDataset, arm: str | None = None) -> float:
    """Mean final outcome among participants with ``d == 1`` at every post-baseline visit."""
    keep = full_compliers(ds, arm)
    if not np.any(keep):
        raise EstimatorError("no participant self-reported compliance at every visit")
    return float(ds.y[keep, -1].mean())


@dataclass(frozen=True)
class EmRegModel:
    delta: LogisticFit
    xi_c1: LinearFit
    xi_c0: LinearFit
    beta_y1: LinearFit
    beta_y0: LinearFit
    recipe: DesignRecipe = DesignRecipe()

    def __post_init__(self):
        if not (self.beta_y1.sigma2 > 0 and self.beta_y0.sigma2 > 0):
            raise ValueError("outcome component variances must be positive")


def _emreg_designs(view: EstimationView, recipe: DesignRecipe):
    ds = view.dataset
    y, z, yl, zl, x = view.y, view.z, view.y_lag, view.z_lag, view.x
    zn, xn = ds.z_names, ds.x_names
    Xw = omega_design(z, yl, zl, x, view.time, ds.K, recipe, zn, xn)
    Xg = biomarker_design(y, z, yl, zl, x, zn, xn)
    Xh = outcome_design(z, yl, zl, x, recipe, zn, xn)
    return Xw, [(Xg, view.b), (Xh, y)]


def _parts(m: EmRegModel):
    return m.delta, (m.xi_c1, m.beta_y1), (m.xi_c0, m.beta_y0)


def emreg_weights(m: EmRegModel, view: EstimationView) -> np.ndarray:
    """E-step weights ``omega g1 h1 / lambda``."""
    Xw, blocks = _emreg_designs(view, m.recipe)
    return _posterior(*_parts(m), Xw, blocks)


def emreg_loglik(m: EmRegModel, view: EstimationView) -> float:
    Xw, blocks = _emreg_designs(view, m.recipe)
    return _loglik(*_parts(m), Xw, blocks)


def fit_em_reg(view: EstimationView, init="biomarker_split", tol: float = 1e-6,
               max_iter: int = 500, recipe: DesignRecipe = DesignRecipe(),
               start: EmRegModel | None = None):
    """EM for the joint biomarker/outcome mixture

    ``lambda = omega g1 h1 + (1 - omega) g0 h0``

    where ``omega`` excludes the current outcome from its regressors. Returns
    ``(EmRegModel, EmTrace)``.
    """
    if len(view) == 0:
        raise EstimatorError("empty estimation view")
    recipe = start.recipe if start is not None else recipe
    Xw, blocks = _emreg_designs(view, recipe)
    if start is not None:
        params, trace = _run_em(Xw, blocks, start=_parts(start), tol=tol, max_iter=max_iter)
    else:
        params, trace = _run_em(Xw, blocks, w0=init_strategy(view, init), tol=tol,
                                max_iter=max_iter)
    delta, (xi1, by1), (xi0, by0) = params
    return EmRegModel(delta, xi1, xi0, by1, by0, recipe), trace


def em_reg_estimate(model: EmRegModel, ds: LongitudinalDataset, arm: str | None = None) -> float:
    """Average compliant-component outcome mean over the final-visit view elements."""
    view = estimation_view(ds, arm)
    last = view.take(view.time == ds.K - 1)
    if len(last) == 0:
        raise EstimatorError("no final-visit elements in the estimation view")
    Xh = outcome_design(last.z, last.y_lag, last.z_lag, last.x, model.recipe, ds.z_names,
                        ds.x_names)
    return float(np.mean(model.beta_y1.predict(Xh)))


class EMRegression(BaseEstimator):
    """scikit-learn style front end to :func:`fit_em_reg` and :func:`em_reg_estimate`."""

    def __init__(self, init="biomarker_split", tol=1e-6, max_iter=500,
                 per_time_intercepts=False, zero_indicator=False):
        self.init = init
        self.tol = tol
        self.max_iter = max_iter
        self.per_time_intercepts = per_time_intercepts
        self.zero_indicator = zero_indicator

    def fit(self, ds: LongitudinalDataset, arm: str | None = None, start: EmRegModel | None = None):
        recipe = DesignRecipe(self.per_time_intercepts, self.zero_indicator)
        self.model_, self.trace_ = fit_em_reg(estimation_view(ds, arm), self.init, self.tol,
                                              self.max_iter, recipe, start)
        self.dataset_, self.arm_ = ds, arm
        return self

    def estimate(self) -> float:
        check_is_fitted(self, "model_")
        return em_reg_estimate(self.model_, self.dataset_, self.arm_)


__all__ = ["EMRegression", "EmRegModel", "EmTrace", "em_reg_estimate", "emreg_loglik",
           "emreg_weights", "fit_em_reg", "full_compliers", "itt", "per_protocol"]
