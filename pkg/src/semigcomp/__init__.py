"""Semiparametric g-computation under unobserved, time-varying noncompliance.

Compliance probabilities come from a biomarker mixture fitted by EM; they
weight the confounder and outcome models, and counterfactual trajectories
under full compliance are simulated with predictive mean matching.
"""
from .data import LongitudinalDataset, estimation_view, load_dataset, write_csv
from .estimators import EMRegression, em_reg_estimate, fit_em_reg, itt, per_protocol
from .gcomp import CausalEstimate, FittedGcompModels, GComputation, estimate, fit_models
from .glm import fit_weighted_linear, fit_weighted_logistic
from .inference import BootstrapResult, bootstrap
from .mixture import ComplianceMixture, MixtureModel, e_step, fit_em, observed_loglik
from .pmm import DonorPool, build_pool
from .simulation import ScenarioConfig, calibrate, generate_dataset, oracle_causal_mean, run_scenario

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult", "CausalEstimate", "ComplianceMixture", "DonorPool", "EMRegression",
    "FittedGcompModels", "GComputation", "LongitudinalDataset", "MixtureModel", "ScenarioConfig",
    "bootstrap", "build_pool", "calibrate", "e_step", "em_reg_estimate", "estimate",
    "estimation_view", "fit_em", "fit_em_reg", "fit_models", "fit_weighted_linear",
    "fit_weighted_logistic", "generate_dataset", "itt", "load_dataset", "observed_loglik",
    "oracle_causal_mean", "per_protocol", "run_scenario", "write_csv",
]
