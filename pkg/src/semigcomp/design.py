"""Regressor construction shared by every conditional model.

All models condition on the previous visit ``L_{j-1} = (Y_{j-1}, Z_{j-1})`` and
the baseline covariates ``X``. The arm is not a column: models are fitted
within one arm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .glm import DesignMatrix


@dataclass(frozen=True)
class DesignRecipe:
    """Which optional columns the designs carry.

    per_time_intercepts
        The compliance model gets one intercept per post-baseline time point
        instead of a shared intercept.
    zero_indicator
        The outcome model gets ``1{Z_j == 0}`` for each confounder, for
        zero-inflated confounders whose structural zeros shift the outcome.
    """

    per_time_intercepts: bool = False
    zero_indicator: bool = False


def _cols(*blocks):
    return np.column_stack([np.asarray(b, dtype=float).reshape(len(b), -1) for b in blocks])


def _intercepts(time, K, per_time):
    if not per_time:
        return np.ones((time.size, 1)), ["const"]
    return (time[:, None] == np.arange(1, K)[None, :]).astype(float), [f"const[t{j}]" for j in range(1, K)]


def lag_names(z_names, x_names):
    return ["y_lag", *(f"{z}_lag" for z in z_names), *x_names]


def compliance_design(y, z, y_lag, z_lag, x, time, K, recipe, z_names, x_names) -> DesignMatrix:
    """Regressors of the compliance probability: current and lagged L, and X."""
    icpt, names = _intercepts(np.asarray(time), K, recipe.per_time_intercepts)
    return DesignMatrix(_cols(icpt, y, z, y_lag, z_lag, x),
                        (*names, "y", *z_names, *lag_names(z_names, x_names)))


def omega_design(z, y_lag, z_lag, x, time, K, recipe, z_names, x_names) -> DesignMatrix:
    """Compliance regressors without the current outcome (joint outcome mixture)."""
    icpt, names = _intercepts(np.asarray(time), K, recipe.per_time_intercepts)
    return DesignMatrix(_cols(icpt, z, y_lag, z_lag, x),
                        (*names, *z_names, *lag_names(z_names, x_names)))


def biomarker_design(y, z, y_lag, z_lag, x, z_names, x_names) -> DesignMatrix:
    n = len(y)
    return DesignMatrix(_cols(np.ones(n), y, z, y_lag, z_lag, x),
                        ("const", "y", *z_names, *lag_names(z_names, x_names)))


def confounder_design(y_lag, z_lag, x, z_names, x_names) -> DesignMatrix:
    """Regressors for the mean of each Z_j: L_{j-1} and X."""
    n = len(y_lag)
    return DesignMatrix(_cols(np.ones(n), y_lag, z_lag, x), ("const", *lag_names(z_names, x_names)))


def outcome_design(z, y_lag, z_lag, x, recipe, z_names, x_names) -> DesignMatrix:
    """Regressors for Y_j: current Z_j, L_{j-1} and X."""
    n = len(y_lag)
    z = np.asarray(z, dtype=float).reshape(n, -1)
    blocks, names = [np.ones(n), z], ["const", *z_names]
    if recipe.zero_indicator:
        blocks.append((z == 0).astype(float))
        names += [f"{name}==0" for name in z_names]
    blocks += [y_lag, z_lag, x]
    return DesignMatrix(_cols(*blocks), (*names, *lag_names(z_names, x_names)))


def view_designs(view, recipe):
    """Compliance, biomarker, confounder and outcome designs for an estimation view."""
    ds = view.dataset
    y, z, yl, zl, x, t = view.y, view.z, view.y_lag, view.z_lag, view.x, view.time
    zn, xn = ds.z_names, ds.x_names
    return dict(
        compliance=compliance_design(y, z, yl, zl, x, t, ds.K, recipe, zn, xn),
        omega=omega_design(z, yl, zl, x, t, ds.K, recipe, zn, xn),
        biomarker=biomarker_design(y, z, yl, zl, x, zn, xn),
        confounder=confounder_design(yl, zl, x, zn, xn),
        outcome=outcome_design(z, yl, zl, x, recipe, zn, xn),
    )
