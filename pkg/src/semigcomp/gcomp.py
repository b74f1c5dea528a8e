"""G-computation under full compliance with weighted model fits.

The conditional models for each confounder ``Z_j`` and the outcome ``Y_j`` are
fitted on the estimation view with per-visit compliance weights (posterior
probabilities, self-reports, true compliance or a biomarker threshold), sharing
coefficients across time points. Counterfactual trajectories are then simulated
forward from resampled baselines, drawing confounders by predictive mean
matching (``sampling="pmm"``) or from a fitted Gaussian (``"parametric"``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import EstimationView, LongitudinalDataset, estimation_view
from .design import DesignRecipe, confounder_design, outcome_design
from .glm import DesignMatrix, LinearFit, RankDeficientError, fit_weighted_linear
from .mixture import MixtureModel, e_step, fit_em
from .pmm import DonorPool, build_pool

WEIGHT_SOURCES = ("posterior", "self_report", "true_compliance", "threshold")
SAMPLING_MODES = ("pmm", "parametric")

#: Trajectories per random stream. Streams are keyed by block index, so the
#: estimate does not depend on how blocks are spread over workers.
BLOCK_SIZE = 1024


class GcompError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FittedGcompModels:
    z_fits: tuple[LinearFit, ...]
    y_fit: LinearFit
    donor_pools: tuple[DonorPool, ...] | None
    weight_source: str
    recipe: DesignRecipe
    z_names: tuple[str, ...]
    x_names: tuple[str, ...]
    z_bounds: tuple[tuple[float, float], ...] | None = None
    y_pool: DonorPool | None = None
    shared_beta: bool = True


@dataclass(frozen=True)
class CausalEstimate:
    mean: float
    R: int
    variance: float
    seed: int
    mode: str = "pmm"

    @property
    def mc_se(self) -> float:
        return math.sqrt(self.variance / self.R)


def compliance_weights(view: EstimationView, source: str, mixture: MixtureModel | None = None,
                       threshold: float | None = None) -> np.ndarray:
    """Per-visit weights replacing the compliance indicator."""
    if source == "posterior":
        if mixture is None:
            raise GcompError("posterior weights need a fitted mixture")
        return e_step(mixture, view)
    if source == "self_report":
        return (view.d == 1).astype(float)
    if source == "true_compliance":
        return (view.c == 1).astype(float)
    if source == "threshold":
        if threshold is None:
            raise GcompError("threshold weights need a threshold")
        return (view.b < threshold).astype(float)
    raise GcompError(f"unknown weight source {source!r}")


def _fit_outcome(Xy: DesignMatrix, y, w) -> LinearFit:
    """Outcome WLS; zero-indicator columns without weighted support get coefficient 0.

    Structural zeros can fall almost entirely on rows with negligible weight
    (for example posterior non-compliers in a bootstrap resample), leaving the
    indicator unidentified. Its coefficient is then fixed at 0.
    """
    try:
        return fit_weighted_linear(Xy, y, w)
    except RankDeficientError as err:
        if not err.columns or not all(c.endswith("==0") for c in err.columns):
            raise
        keep = [i for i, lab in enumerate(Xy.labels) if lab not in err.columns]
        sub = fit_weighted_linear(DesignMatrix(Xy.values[:, keep], [Xy.labels[i] for i in keep]), y, w)
        coef = np.zeros(Xy.columns)
        coef[keep] = sub.coef
        return LinearFit(coef, sub.sigma2, sub.n_effective, Xy.labels)


def fit_models(view: EstimationView, weights, recipe: DesignRecipe = DesignRecipe(),
               weight_source: str = "posterior", pmm: bool = True, k: int = 5,
               pmm_outcome: bool = False) -> FittedGcompModels:
    """Weighted least-squares mean models for every Z component and for Y.

    Each fit solves the weighted estimating equation of its linear mean model,
    with coefficients shared across time points. The outcome variance is the
    weighted MLE; it drives parametric outcome draws.
    """
    w = np.asarray(weights, dtype=float)
    if w.size != len(view):
        raise GcompError("weights must align with the view")
    if np.any(w < 0) or np.any(w > 1):
        raise GcompError("weights must lie in [0, 1]")
    if not np.any(w > 0):
        raise GcompError("all weights are zero")
    ds = view.dataset
    Xz = confounder_design(view.y_lag, view.z_lag, view.x, ds.z_names, ds.x_names)
    Xy = outcome_design(view.z, view.y_lag, view.z_lag, view.x, recipe, ds.z_names, ds.x_names)
    z = view.z
    z_fits = tuple(fit_weighted_linear(Xz, z[:, c], w) for c in range(z.shape[1]))
    y_fit = _fit_outcome(Xy, view.y, w)
    indicator = weight_source != "posterior"
    pools = y_pool = None
    if pmm:
        pools = tuple(build_pool(f, Xz, z[:, c], w, k, indicator) for c, f in enumerate(z_fits))
        if pmm_outcome:
            y_pool = build_pool(y_fit, Xy, view.y, w, k, indicator)
    return FittedGcompModels(z_fits, y_fit, pools, weight_source, recipe, ds.z_names,
                             ds.x_names, ds.z_bounds, y_pool)


def simulate(models: FittedGcompModels, y0, z0, x, K: int, mode: str,
             rng: np.random.Generator, record=None) -> np.ndarray:
    """Forward-simulate trajectories from baselines ``(y0, z0, x)``; returns ``y`` at ``K - 1``.

    At each step the confounders are drawn first (PMM or clipped Gaussian), then
    the outcome from its fitted Gaussian (or by PMM when an outcome pool exists).
    ``record``, if a list, receives the confounder draws of every step.
    """
    if mode not in SAMPLING_MODES:
        raise GcompError(f"unknown sampling mode {mode!r}")
    if mode == "pmm" and models.donor_pools is None:
        raise GcompError("PMM sampling needs donor pools")
    y = np.asarray(y0, dtype=float).copy()
    z = np.asarray(z0, dtype=float).reshape(y.size, -1).copy()
    x = np.asarray(x, dtype=float).reshape(y.size, -1)
    zn, xn = models.z_names, models.x_names
    for _ in range(1, K):
        Xz = confounder_design(y, z, x, zn, xn).values
        z_new = np.empty_like(z)
        for c, fit in enumerate(models.z_fits):
            z_hat = Xz @ fit.coef
            if mode == "pmm":
                z_new[:, c] = models.donor_pools[c].draw_many(z_hat, rng)
            else:
                draw = z_hat + math.sqrt(fit.sigma2) * rng.standard_normal(z_hat.size)
                if models.z_bounds is not None:
                    lo, hi = models.z_bounds[c]
                    draw = np.clip(draw, lo, hi)
                z_new[:, c] = draw
        if record is not None:
            record.append(z_new.copy())
        Xy = outcome_design(z_new, y, z, x, models.recipe, zn, xn).values
        y_hat = Xy @ models.y_fit.coef
        if models.y_pool is not None and mode == "pmm":
            y = models.y_pool.draw_many(y_hat, rng)
        else:
            y = y_hat + math.sqrt(models.y_fit.sigma2) * rng.standard_normal(y_hat.size)
        z = z_new
    return y


def simulate_trajectory(models: FittedGcompModels, baseline, K: int, mode: str,
                        rng: np.random.Generator) -> float:
    """Single trajectory from ``baseline = ((y0, z0), x)``."""
    (y0, z0), x = baseline
    return float(simulate(models, [y0], [np.ravel(z0)], [np.ravel(x)], K, mode, rng)[0])


def baseline_pool(ds: LongitudinalDataset, arm: str | None = None):
    """Joint baseline records ``(y0, z0, x)`` of eligible participants, in id order."""
    keep = ~ds.missing[:, 0]
    if arm is not None:
        keep &= ds.arm == arm
    if not np.any(keep):
        raise GcompError("no eligible baseline records")
    return ds.y[keep, 0], ds.z[keep, 0], ds.x[keep]


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


def estimate(models: FittedGcompModels, ds: LongitudinalDataset, arm: str | None, R: int,
             mode: str, seed: int, record=None) -> CausalEstimate:
    """Monte Carlo g-formula mean of the final outcome under full compliance.

    Each of the ``R`` trajectories starts from a participant drawn uniformly with
    replacement, taking their baseline outcome, confounders and covariates
    together.
    """
    if R < 1:
        raise GcompError("R must be at least 1")
    y0, z0, x = baseline_pool(ds, arm)
    outs = []
    for block, start in enumerate(range(0, R, BLOCK_SIZE)):
        size = min(BLOCK_SIZE, R - start)
        rng = block_rng(seed, block)
        idx = rng.integers(0, y0.size, size)
        outs.append(simulate(models, y0[idx], z0[idx], x[idx], ds.K, mode, rng, record))
    y = np.concatenate(outs)
    mean = math.fsum(y) / R
    var = math.fsum((y - mean) ** 2) / (R - 1) if R > 1 else 0.0
    return CausalEstimate(mean, R, var, seed, mode)


class GComputation(BaseEstimator):
    """G-computation estimator of the final-visit mean under full compliance.

    Parameters
    ----------
    weights : {"posterior", "self_report", "true_compliance", "threshold"}
        Source of the per-visit compliance weights.
    sampling : {"pmm", "parametric"}
        How confounders are drawn in the forward simulation.
    n_samples : int
        Monte Carlo trajectories ``R``.
    k : int
        Donor candidates per PMM draw.
    """

    def __init__(self, weights="posterior", sampling="pmm", n_samples=10000, k=5,
                 per_time_intercepts=False, zero_indicator=False, threshold=None,
                 em_init="biomarker_split", em_tol=1e-6, em_max_iter=500,
                 pmm_outcome=False, random_state=0):
        self.weights = weights
        self.sampling = sampling
        self.n_samples = n_samples
        self.k = k
        self.per_time_intercepts = per_time_intercepts
        self.zero_indicator = zero_indicator
        self.threshold = threshold
        self.em_init = em_init
        self.em_tol = em_tol
        self.em_max_iter = em_max_iter
        self.pmm_outcome = pmm_outcome
        self.random_state = random_state

    def fit(self, ds: LongitudinalDataset, arm: str | None = None, mixture=None,
            mixture_start: MixtureModel | None = None):
        """Fit the weighted models on ``arm``.

        ``mixture`` reuses an already fitted compliance mixture;
        ``mixture_start`` warm-starts EM from one.
        """
        if self.weights not in WEIGHT_SOURCES:
            raise GcompError(f"unknown weight source {self.weights!r}")
        if self.sampling not in SAMPLING_MODES:
            raise GcompError(f"unknown sampling mode {self.sampling!r}")
        if arm is None:
            if len(ds.arms) != 1:
                raise GcompError("dataset has several arms; pass arm=")
            arm = ds.arms[0]
        if self.weights == "true_compliance" and not ds.has_compliance:
            raise GcompError("true compliance is only available in simulated data")
        recipe = DesignRecipe(self.per_time_intercepts, self.zero_indicator)
        view = estimation_view(ds, arm)
        if len(view) == 0:
            raise GcompError("empty estimation view")
        self.mixture_ = self.em_trace_ = None
        if self.weights == "posterior":
            if mixture is None:
                mixture, self.em_trace_ = fit_em(view, self.em_init, self.em_tol,
                                                 self.em_max_iter, recipe, mixture_start)
            self.mixture_ = mixture
        self.weights_ = compliance_weights(view, self.weights, self.mixture_, self.threshold)
        self.models_ = fit_models(view, self.weights_, recipe, self.weights,
                                  pmm=self.sampling == "pmm", k=self.k,
                                  pmm_outcome=self.pmm_outcome)
        self.arm_ = arm
        self.dataset_ = ds
        return self

    def estimate(self, n_samples=None, random_state=None, record=None) -> CausalEstimate:
        check_is_fitted(self, "models_")
        R = self.n_samples if n_samples is None else n_samples
        seed = self.random_state if random_state is None else random_state
        return estimate(self.models_, self.dataset_, self.arm_, R, self.sampling, seed, record)
