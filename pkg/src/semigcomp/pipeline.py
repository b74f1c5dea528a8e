"""One entry point for every estimator, shared by the simulation study, the
bootstrap and the command line.

Estimator names
---------------
itt               difference of complete-case final means between two arms
pp                per protocol (self-reported compliance at every visit)
emreg             joint biomarker/outcome mixture regression
gcomp-parametric  posterior weights, Gaussian confounder draws
gcomp-selfreport  self-report weights, predictive mean matching
gcomp-true        true-compliance weights (simulated data only), matching
gcomp-full        posterior weights, predictive mean matching
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, LongitudinalDataset, estimation_view, mark_missing_noncompliant
from .design import DesignRecipe
from .estimators import EmRegModel, EstimatorError, em_reg_estimate, fit_em_reg, itt, per_protocol
from .gcomp import GcompError, compliance_weights, estimate, fit_models
from .glm import RankDeficientError, ZeroWeightError
from .mixture import EMError, MixtureModel, fit_em
from .pmm import EmptyPoolError

ESTIMATORS = ("itt", "pp", "emreg", "gcomp-parametric", "gcomp-selfreport", "gcomp-true",
              "gcomp-full")

DISPLAY_NAMES = {
    "itt": "ITT",
    "pp": "Per Protocol",
    "emreg": "EM-REG",
    "gcomp-parametric": "G-computation without predictive mean matching",
    "gcomp-selfreport": "G-computation with self-reported compliance",
    "gcomp-true": "G-computation with true compliance",
    "gcomp-full": "Full G-computation",
}

# weight source and sampling mode of each g-computation variant
_GCOMP = {
    "gcomp-parametric": ("posterior", "parametric"),
    "gcomp-selfreport": ("self_report", "pmm"),
    "gcomp-true": ("true_compliance", "pmm"),
    "gcomp-full": ("posterior", "pmm"),
}

#: Failures that exclude a replicate rather than abort a run.
NUMERICAL_FAILURES = (EMError, RankDeficientError, ZeroWeightError, EmptyPoolError,
                      np.linalg.LinAlgError, FloatingPointError)


class InputError(ValueError):
    """The request cannot be served by the data (wrong arm, missing columns...)."""


class NumericalFailure(RuntimeError):
    """A fit failed or did not converge."""


def parse_estimators(text: str | None) -> tuple[str, ...]:
    if not text:
        raise InputError("no estimators requested")
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    unknown = [s for s in names if s not in ESTIMATORS]
    if unknown:
        raise InputError(f"unknown estimators {unknown}; choose from {', '.join(ESTIMATORS)}")
    if len(set(names)) != len(names):
        raise InputError("estimator listed twice")
    return names


@dataclass(frozen=True)
class AnalysisConfig:
    """Analysis settings that are not estimator-specific.

    ``arm`` is the analysed arm (inferred when the data have one arm);
    ``control`` is the comparison arm of ITT.
    """

    R: int = 10_000
    k: int = 5
    per_time_intercepts: bool = False
    zero_indicator: bool = False
    em_init: str = "biomarker_split"
    em_tol: float = 1e-6
    em_max_iter: int = 500
    arm: str | None = None
    control: str | None = None
    missing_noncompliant: bool = False

    def __post_init__(self):
        if self.R < 1:
            raise InputError("R must be at least 1")
        if self.k < 1:
            raise InputError("k must be at least 1")

    @property
    def recipe(self) -> DesignRecipe:
        return DesignRecipe(self.per_time_intercepts, self.zero_indicator)

    def replace(self, **changes) -> "AnalysisConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = ["[analysis]"]
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else (repr(v) if isinstance(v, float) else v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AnalysisConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.optionxform = str
        cp.read_string(text)
        if "analysis" not in cp:
            return cls()
        sec = cp["analysis"]
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(sec) - set(names)
        if unknown:
            raise InputError(f"unknown analysis keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in sec.items():
            kind = names[key].type
            try:
                if kind in ("int",):
                    kwargs[key] = int(raw)
                elif kind in ("float",):
                    kwargs[key] = float(raw)
                elif kind in ("bool",):
                    kwargs[key] = sec.getboolean(key)
                else:
                    kwargs[key] = raw or None
            except ValueError as exc:
                raise InputError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def read(cls, path) -> "AnalysisConfig":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    arm: str
    estimate: float
    R: int | None
    seed: int
    n_participants: int
    n_view: int
    control_mean: float | None = None
    arm_mean: float | None = None

    FIELDS = ("estimator", "arm", "estimate", "R", "seed", "n_participants", "n_view",
              "arm_mean", "control_mean")


@dataclass
class PipelineResult:
    estimates: dict[str, float]
    failures: dict[str, str]
    reports: dict[str, EstimateReport] = field(default_factory=dict)
    mixture: MixtureModel | None = None
    emreg: EmRegModel | None = None


def resolve_arm(ds: LongitudinalDataset, cfg: AnalysisConfig) -> str:
    if cfg.arm is not None:
        if cfg.arm not in ds.arms:
            raise InputError(f"arm {cfg.arm!r} not in data (arms: {', '.join(ds.arms)})")
        return cfg.arm
    if len(ds.arms) != 1:
        raise InputError(f"data have arms {', '.join(ds.arms)}; set arm in the analysis config")
    return ds.arms[0]


def check_request(ds: LongitudinalDataset, names, cfg: AnalysisConfig) -> str:
    """Validate the estimator request against the data; returns the analysed arm."""
    arm = resolve_arm(ds, cfg)
    if "gcomp-true" in names and not ds.has_compliance:
        raise InputError("gcomp-true needs true compliance, which only simulated data carry")
    if "itt" in names:
        others = [a for a in ds.arms if a != arm]
        if not others:
            raise InputError("itt needs two arms; the data have one")
        if cfg.control is None and len(others) > 1:
            raise InputError("several comparison arms; set control in the analysis config")
        if cfg.control is not None and cfg.control not in others:
            raise InputError(f"control arm {cfg.control!r} not in data")
    return arm


def run_estimators(ds: LongitudinalDataset, names, cfg: AnalysisConfig = AnalysisConfig(),
                   seed: int = 0, mixture_start: MixtureModel | None = None,
                   emreg_start: EmRegModel | None = None) -> PipelineResult:
    """Run every estimator in ``names`` on ``ds``.

    The compliance mixture is fitted once and shared by the posterior-weighted
    g-computations; all g-computations use the Monte Carlo seed ``seed``.
    Numerical failures (including EM non-convergence) are recorded per
    estimator in ``failures`` instead of raised; invalid requests raise
    :class:`InputError`.
    """
    names = tuple(names)
    if cfg.missing_noncompliant:
        ds = mark_missing_noncompliant(ds)
    arm = check_request(ds, names, cfg)
    view = estimation_view(ds, arm)
    recipe = cfg.recipe
    out = PipelineResult({}, {})

    def report(name, value, R=None, **extra):
        out.estimates[name] = float(value)
        out.reports[name] = EstimateReport(name, arm, float(value), R, seed, int(np.sum(ds.arm == arm)),
                                           len(view), **extra)

    mixture, mixture_error = None, None
    if any(_GCOMP.get(s, ("",))[0] == "posterior" for s in names):
        try:
            mixture, trace = fit_em(view, cfg.em_init, cfg.em_tol, cfg.em_max_iter, recipe,
                                    mixture_start)
            if not trace.converged:
                mixture_error = f"EM did not converge in {trace.iterations} iterations"
            out.mixture = mixture
        except NUMERICAL_FAILURES as exc:
            mixture_error = f"EM failed: {exc}"

    for name in names:
        try:
            if name == "itt":
                others = [a for a in ds.arms if a != arm]
                control = cfg.control or others[0]
                ma, mb, diff = itt(ds, arm, control)
                report(name, diff, arm_mean=ma, control_mean=mb)
            elif name == "pp":
                report(name, per_protocol(ds, arm))
            elif name == "emreg":
                model, trace = fit_em_reg(view, cfg.em_init, cfg.em_tol, cfg.em_max_iter, recipe,
                                          emreg_start)
                if not trace.converged:
                    raise NumericalFailure(f"EM did not converge in {trace.iterations} iterations")
                out.emreg = model
                report(name, em_reg_estimate(model, ds, arm))
            else:
                source, mode = _GCOMP[name]
                if source == "posterior" and mixture_error:
                    raise NumericalFailure(mixture_error)
                w = compliance_weights(view, source, mixture)
                models = fit_models(view, w, recipe, source, pmm=mode == "pmm", k=cfg.k)
                report(name, estimate(models, ds, arm, cfg.R, mode, seed).mean, R=cfg.R)
        except (NumericalFailure, EstimatorError, GcompError, *NUMERICAL_FAILURES) as exc:
            out.failures[name] = str(exc)
    return out


__all__ = ["AnalysisConfig", "DISPLAY_NAMES", "ESTIMATORS", "EstimateReport", "InputError",
           "NumericalFailure", "PipelineResult", "check_request", "parse_estimators",
           "resolve_arm", "run_estimators", "DataError"]
