"""Two-component biomarker mixture for unobserved compliance, fitted by EM.

Among self-reported compliant visits the biomarker density is

    psi(b) = rho * g1(b) + (1 - rho) * g0(b)

with ``rho`` a logistic model for the compliance probability and ``g1``/``g0``
Gaussian linear models for the biomarker among compliers and non-compliers.
The posterior ``rho * g1 / psi`` replaces the compliance indicator as a weight
in the downstream estimating equations. Visits with ``d == 0`` are taken to be
non-compliant and never enter the fit.

The compliant component is, by convention, the one with the lower mean fitted
biomarker.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import EstimationView, Observation, Participant
from .design import DesignRecipe, biomarker_design, compliance_design
from .glm import (DesignMatrix, LinearFit, LogisticFit, ZeroWeightError, fit_weighted_linear,
                  fit_weighted_logistic, gaussian_logpdf)

VARIANCE_FLOOR = 1e-8


class EMError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmTrace:
    loglik: tuple[float, ...]
    iterations: int
    converged: bool
    frozen: tuple[str, ...] = ()


@dataclass(frozen=True)
class MixtureModel:
    alpha: LogisticFit
    xi_c1: LinearFit
    xi_c0: LinearFit
    recipe: DesignRecipe = DesignRecipe()

    def __post_init__(self):
        if not (self.xi_c1.sigma2 > 0 and self.xi_c0.sigma2 > 0):
            raise ValueError("component variances must be positive")


# --- generic two-component machinery ----------------------------------------------
#
# A "block" is a (design, response) pair with its own Gaussian linear model in
# each component. The compliance mixture has one block (the biomarker); the joint
# biomarker/outcome mixture has two.


def _log_parts(mix: LogisticFit, fits1, fits0, Xm, blocks):
    eta = Xm.values @ mix.coef
    la = log_expit(eta)
    lb = log_expit(-eta)
    for (X, r), f1, f0 in zip(blocks, fits1, fits0):
        la = la + gaussian_logpdf(r, X.values @ f1.coef, f1.sigma2)
        lb = lb + gaussian_logpdf(r, X.values @ f0.coef, f0.sigma2)
    return la, lb


def _check(lse):
    if not np.all(np.isfinite(lse)):
        raise EMError("non-finite mixture density")
    return lse


def _loglik(mix, fits1, fits0, Xm, blocks) -> float:
    la, lb = _log_parts(mix, fits1, fits0, Xm, blocks)
    return float(_check(np.logaddexp(la, lb)).sum())


def _posterior(mix, fits1, fits0, Xm, blocks) -> np.ndarray:
    la, lb = _log_parts(mix, fits1, fits0, Xm, blocks)
    return np.exp(la - np.logaddexp(la, lb))


def _floor(fit: LinearFit) -> LinearFit:
    return fit if fit.sigma2 >= VARIANCE_FLOOR else fit.with_sigma2(VARIANCE_FLOOR)


def _m_step(Xm, blocks, w, previous=None):
    """Weighted logistic fit of the soft labels plus one weighted Gaussian fit per block
    and component. A component whose effective weight is below ``p + 1`` keeps its
    previous value (and is reported in ``frozen``)."""
    start = None if previous is None else previous[0].coef
    mix = fit_weighted_logistic(Xm, w, None, start=start)
    fits = {1: [], 0: []}
    frozen = []
    for label, weight in ((1, w), (0, 1.0 - w)):
        for k, (X, r) in enumerate(blocks):
            try:
                if weight.sum() < X.columns + 1:
                    raise ZeroWeightError(f"effective weight {weight.sum():.3g} too small")
                fits[label].append(_floor(fit_weighted_linear(X, r, weight)))
            except ZeroWeightError:
                if previous is None:
                    raise
                fits[label].append(previous[1 if label == 1 else 2][k])
                frozen.append(f"c{label}[{k}]")
    return mix, tuple(fits[1]), tuple(fits[0]), tuple(frozen)


def _relabel(mix, fits1, fits0, Xg):
    """Make component 1 the one with the lower mean fitted value of the first block."""
    if np.mean(Xg.values @ fits1[0].coef) > np.mean(Xg.values @ fits0[0].coef):
        return mix.negate(), fits0, fits1
    return mix, fits1, fits0


def _run_em(Xm, blocks, w0=None, start=None, tol=1e-6, max_iter=500):
    """EM from initial soft labels ``w0`` (one M-step first) or from ``start``."""
    if start is None:
        mix, f1, f0, frozen = _m_step(Xm, blocks, w0)
    else:
        mix, f1, f0 = start
        frozen = ()
    la, lb = _log_parts(mix, f1, f0, Xm, blocks)
    lse = _check(np.logaddexp(la, lb))
    ll = float(lse.sum())
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = np.exp(la - lse)
        mix, f1, f0, frozen = _m_step(Xm, blocks, w, (mix, f1, f0))
        la, lb = _log_parts(mix, f1, f0, Xm, blocks)
        lse = _check(np.logaddexp(la, lb))
        ll_new = float(lse.sum())
        trace.append(ll_new)
        done = abs(ll_new - ll) <= tol * abs(ll)
        ll = ll_new
        if done:
            converged = not frozen
            break
    mix, f1, f0 = _relabel(mix, f1, f0, blocks[0][0])
    return (mix, f1, f0), EmTrace(tuple(trace), it, converged, frozen)


# --- compliance mixture ----------------------------------------------------------


def _designs(view: EstimationView, recipe: DesignRecipe):
    ds = view.dataset
    y, z, yl, zl, x = view.y, view.z, view.y_lag, view.z_lag, view.x
    Xr = compliance_design(y, z, yl, zl, x, view.time, ds.K, recipe, ds.z_names, ds.x_names)
    Xg = biomarker_design(y, z, yl, zl, x, ds.z_names, ds.x_names)
    return Xr, [(Xg, view.b)]


def _parts(m: MixtureModel):
    return m.alpha, (m.xi_c1,), (m.xi_c0,)


def observed_loglik(m: MixtureModel, view: EstimationView) -> float:
    """Sum over the view of ``log(rho g1 + (1 - rho) g0)``."""
    Xr, blocks = _designs(view, m.recipe)
    return _loglik(*_parts(m), Xr, blocks)


def e_step(m: MixtureModel, view: EstimationView) -> np.ndarray:
    """Posterior compliance probabilities ``rho g1 / psi``, computed in log space."""
    Xr, blocks = _designs(view, m.recipe)
    return _posterior(*_parts(m), Xr, blocks)


def m_step(view: EstimationView, w, previous: MixtureModel | None = None,
           recipe: DesignRecipe | None = None) -> MixtureModel:
    """Refit ``rho`` to the soft labels ``w`` and the two biomarker components with
    weights ``w`` and ``1 - w``. A component with too little weight is frozen at
    its value in ``previous``; without ``previous`` the error propagates."""
    recipe = recipe or (previous.recipe if previous else DesignRecipe())
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("weights must lie in [0, 1]")
    Xr, blocks = _designs(view, recipe)
    prev = None if previous is None else _parts(previous)
    mix, f1, f0, _ = _m_step(Xr, blocks, w, prev)
    return MixtureModel(mix, f1[0], f0[0], recipe)


def init_strategy(view: EstimationView, mode="biomarker_split") -> np.ndarray:
    """Initial soft labels.

    ``"biomarker_split"``: 1 below the view median of the biomarker, else 0.
    ``("threshold", t)``: ``1{b < t}``.
    ``("random", seed)``: Uniform(0.25, 0.75) draws.
    """
    b = view.b
    if mode == "biomarker_split":
        return (b < np.median(b)).astype(float)
    if isinstance(mode, (tuple, list)) and len(mode) == 2:
        kind, arg = mode
        if kind == "threshold":
            return (b < float(arg)).astype(float)
        if kind == "random":
            return np.random.default_rng(int(arg)).uniform(0.25, 0.75, size=b.size)
    raise ValueError(f"unknown initialization mode {mode!r}")


def fit_em(view: EstimationView, init="biomarker_split", tol: float = 1e-6, max_iter: int = 500,
           recipe: DesignRecipe | None = None, start: MixtureModel | None = None):
    """Maximum-likelihood mixture fit.

    Iterates E- and M-steps until the relative change of the observed
    log-likelihood is below ``tol``. ``start`` warm-starts from a fitted model
    instead of ``init``. Returns ``(MixtureModel, EmTrace)``; a fit that did not
    converge within ``max_iter`` is returned with ``trace.converged = False``.
    """
    if len(view) == 0:
        raise EMError("empty estimation view")
    recipe = recipe or (start.recipe if start else DesignRecipe())
    Xr, blocks = _designs(view, recipe)
    if start is not None:
        params, trace = _run_em(Xr, blocks, start=_parts(start), tol=tol, max_iter=max_iter)
    else:
        w0 = init_strategy(view, init)
        params, trace = _run_em(Xr, blocks, w0=w0, tol=tol, max_iter=max_iter)
    mix, f1, f0 = params
    return MixtureModel(mix, f1[0], f0[0], recipe), trace


def posterior_compliance(m: MixtureModel, obs: Observation, lag: Observation,
                         participant: Participant, K: int | None = None,
                         z_names: Sequence[str] | None = None,
                         x_names: Sequence[str] | None = None) -> float:
    """Posterior compliance probability of a single visit (0 when ``d == 0``)."""
    if obs.d == 0:
        return 0.0
    q, p = len(obs.z), len(participant.x)
    z_names = z_names or [f"z{k}" for k in range(q)]
    x_names = x_names or [f"x{k}" for k in range(p)]
    K = K or (len(participant.observations) or obs.time + 1)
    row = lambda v: np.asarray(v, dtype=float).reshape(1, -1)  # noqa: E731
    args = (row([obs.y]), row(obs.z), row([lag.y]), row(lag.z), row(participant.x))
    Xr = compliance_design(*args, np.array([obs.time]), K, m.recipe, z_names, x_names)
    Xg = biomarker_design(*args, z_names, x_names)
    return float(_posterior(*_parts(m), Xr, [(Xg, np.array([obs.b]))])[0])


# --- export ------------------------------------------------------------------------


def save_model(m: MixtureModel, path) -> Path:
    """Write the fitted model as a key-value text document."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["recipe"] = {"per_time_intercepts": str(m.recipe.per_time_intercepts),
                    "zero_indicator": str(m.recipe.zero_indicator)}
    cp["alpha"] = {lab: repr(float(v)) for lab, v in zip(m.alpha.labels, m.alpha.coef)}
    for name, fit in (("xi_c1", m.xi_c1), ("xi_c0", m.xi_c0)):
        cp[name] = {lab: repr(float(v)) for lab, v in zip(fit.labels, fit.coef)}
        cp[name]["sigma2"] = repr(fit.sigma2)
        cp[name]["n_effective"] = repr(fit.n_effective)
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("# two-component biomarker mixture\n")
        cp.write(fh)
    return path


def load_model(path) -> MixtureModel:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    recipe = DesignRecipe(cp.getboolean("recipe", "per_time_intercepts"),
                          cp.getboolean("recipe", "zero_indicator"))
    a = cp["alpha"]
    alpha = LogisticFit(np.array([float(v) for v in a.values()]), True, 0, False, tuple(a))
    fits = []
    for name in ("xi_c1", "xi_c0"):
        sec = dict(cp[name])
        sigma2, neff = float(sec.pop("sigma2")), float(sec.pop("n_effective"))
        fits.append(LinearFit(np.array([float(v) for v in sec.values()]), sigma2, neff, tuple(sec)))
    return MixtureModel(alpha, fits[0], fits[1], recipe)


class ComplianceMixture(BaseEstimator):
    """scikit-learn style front end to :func:`fit_em`.

    ``fit`` takes an :class:`~semigcomp.data.EstimationView`;
    ``predict_proba`` returns posterior compliance probabilities for a view.
    """

    def __init__(self, init="biomarker_split", tol=1e-6, max_iter=500, per_time_intercepts=False):
        self.init = init
        self.tol = tol
        self.max_iter = max_iter
        self.per_time_intercepts = per_time_intercepts

    def fit(self, view, y=None, start: MixtureModel | None = None):
        recipe = DesignRecipe(per_time_intercepts=self.per_time_intercepts)
        self.model_, self.trace_ = fit_em(view, self.init, self.tol, self.max_iter, recipe, start)
        return self

    def predict_proba(self, view):
        check_is_fitted(self, "model_")
        return e_step(self.model_, view)

    def score(self, view, y=None):
        check_is_fitted(self, "model_")
        return observed_loglik(self.model_, view)
